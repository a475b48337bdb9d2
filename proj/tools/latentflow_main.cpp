// Command-line surface tying the stages together:
//   gen-data -> train (pretrain/sft) -> sample -> dpo -> eval -> ablate
// Every run is reproducible from (config, seed); all artifacts are binary or
// line-oriented files under --out.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "latentflow/checkpoint.hpp"
#include "latentflow/config.hpp"
#include "latentflow/pipeline.hpp"

namespace lf = latentflow;
namespace fs = std::filesystem;

namespace {

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "run";
  std::vector<std::string> overrides;  // key=value pairs

  // spec-named convenience overrides
  std::optional<double> cfg_scale, beta, gap;
  std::optional<std::uint64_t> dpo_epochs;
  std::optional<std::string> winner_source;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "JSON config file (empty file = defaults)");
  cmd->add_option("--seed", o.seed, "master seed override");
  cmd->add_option("--out", o.out_dir, "output directory")->capture_default_str();
  cmd->add_option("--set", o.overrides, "override any config key, key=value (repeatable)");
  cmd->add_option("--cfg-scale", o.cfg_scale, "guidance scale override");
  cmd->add_option("--beta", o.beta, "DPO beta override");
  cmd->add_option("--gap", o.gap, "win-lose score gap override");
  cmd->add_option("--dpo-epochs", o.dpo_epochs, "DPO epoch count override");
  cmd->add_option("--winner-source", o.winner_source, "generated | ground_truth");
}

lf::RunConfig resolve_config(const CommonOpts& o) {
  nlohmann::json j = nlohmann::json::object();
  if (!o.config_path.empty()) j = lf::config_to_json(lf::parse_config(o.config_path));
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw lf::ConfigError("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    const std::string value = kv.substr(eq + 1);
    try {
      j[key] = nlohmann::json::parse(value);
    } catch (const nlohmann::json::exception&) {
      j[key] = value;  // bare strings need no quotes
    }
  }
  if (o.seed) j["seed"] = *o.seed;
  if (o.cfg_scale) j["cfg_scale"] = *o.cfg_scale;
  if (o.beta) j["beta"] = *o.beta;
  if (o.gap) j["gap"] = *o.gap;
  if (o.dpo_epochs) j["dpo_epochs"] = *o.dpo_epochs;
  if (o.winner_source) j["winner_source"] = *o.winner_source;
  lf::RunConfig cfg = lf::config_from_json(j);
  lf::log_info("resolved config: " + lf::config_to_json(cfg).dump());
  return cfg;
}

std::ofstream open_log(const std::string& path) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw lf::PersistenceError("cannot open log file: " + path);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flow-matching generation lab on synthetic latent sequences"};
  app.require_subcommand(1);

  CommonOpts gen_o, train_o, sample_o, dpo_o, eval_o, ablate_o;

  auto* gen_cmd = app.add_subcommand("gen-data", "generate train/eval mixture datasets");
  add_common(gen_cmd, gen_o);

  auto* train_cmd = app.add_subcommand("train", "flow-matching training (pretrain or sft)");
  add_common(train_cmd, train_o);
  std::string train_stage = "pretrain";
  std::string train_data, train_init;
  std::optional<std::uint64_t> train_epochs;
  train_cmd->add_option("--stage", train_stage, "pretrain | sft")->capture_default_str();
  train_cmd->add_option("--data", train_data, "dataset file (.drpd)")->required();
  train_cmd->add_option("--init", train_init, "checkpoint to continue from (.drpc)");
  train_cmd->add_option("--epochs", train_epochs, "epoch count for this stage");

  auto* sample_cmd = app.add_subcommand("sample", "generate latents from a checkpoint");
  add_common(sample_cmd, sample_o);
  std::string sample_ckpt;
  std::optional<std::uint64_t> sample_n;
  sample_cmd->add_option("--checkpoint", sample_ckpt, "model checkpoint (.drpc)")->required();
  sample_cmd->add_option("--n", sample_n, "number of sequences (default n_sample)");

  auto* dpo_cmd = app.add_subcommand("dpo", "mine win-lose pairs and run preference training");
  add_common(dpo_cmd, dpo_o);
  std::string dpo_ckpt, dpo_data;
  dpo_cmd->add_option("--checkpoint", dpo_ckpt, "starting checkpoint (.drpc)")->required();
  dpo_cmd->add_option("--data", dpo_data, "dataset for ground-truth winners (.drpd)");

  auto* eval_cmd = app.add_subcommand("eval", "distribution metrics between two sample files");
  add_common(eval_cmd, eval_o);
  std::string eval_ref, eval_gen;
  eval_cmd->add_option("--ref", eval_ref, "reference dataset file")->required();
  eval_cmd->add_option("--gen", eval_gen, "generated dataset file")->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "sweep gap / dpo-epochs / winner source");
  add_common(ablate_cmd, ablate_o);
  std::string ablate_ckpt, ablate_data;
  ablate_cmd->add_option("--checkpoint", ablate_ckpt, "base checkpoint (.drpc)")->required();
  ablate_cmd->add_option("--data", ablate_data, "dataset for ground-truth winners (.drpd)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen_cmd->parsed()) {
      const lf::RunConfig cfg = resolve_config(gen_o);
      lf::run_gen_data(cfg, gen_o.out_dir);
    } else if (train_cmd->parsed()) {
      lf::RunConfig cfg = resolve_config(train_o);
      lf::Stage stage;
      if (train_stage == "pretrain") stage = lf::Stage::Pretrain;
      else if (train_stage == "sft") stage = lf::Stage::Sft;
      else throw lf::ConfigError("--stage must be pretrain or sft");
      if (train_epochs) {
        if (stage == lf::Stage::Pretrain) cfg.pretrain_epochs = *train_epochs;
        else cfg.sft_epochs = *train_epochs;
      }
      const lf::Dataset data = lf::load_dataset(train_data);
      std::optional<lf::Checkpoint> prev;
      if (!train_init.empty()) prev = lf::load_checkpoint(train_init);
      fs::create_directories(train_o.out_dir);
      auto log = open_log(train_o.out_dir + "/train_" + train_stage + ".log");
      const lf::Checkpoint out = lf::run_train_stage(cfg, stage, data,
                                                     prev ? &*prev : nullptr, &log);
      const std::string path = train_o.out_dir + "/" + train_stage + ".drpc";
      lf::save_checkpoint(out, path);
      lf::log_info("wrote checkpoint " + path);
    } else if (sample_cmd->parsed()) {
      const lf::RunConfig cfg = resolve_config(sample_o);
      const lf::Checkpoint ckpt = lf::load_checkpoint(sample_ckpt);
      fs::create_directories(sample_o.out_dir);
      auto timing = open_log(sample_o.out_dir + "/timing.jsonl");
      const std::size_t n = sample_n ? static_cast<std::size_t>(*sample_n) : cfg.n_sample;
      const auto rep =
          lf::run_sample(cfg, ckpt, n, sample_o.out_dir + "/samples.drpd", &timing);
      lf::log_info("generated " + std::to_string(rep.n) + " sequences, rtf " +
                   std::to_string(rep.rtf_value));
    } else if (dpo_cmd->parsed()) {
      const lf::RunConfig cfg = resolve_config(dpo_o);
      const lf::Checkpoint ckpt = lf::load_checkpoint(dpo_ckpt);
      std::optional<lf::Dataset> data;
      if (!dpo_data.empty()) data = lf::load_dataset(dpo_data);
      fs::create_directories(dpo_o.out_dir);
      auto log = open_log(dpo_o.out_dir + "/train_dpo.log");
      const auto res = lf::run_dpo(cfg, ckpt, data ? &*data : nullptr,
                                   dpo_o.out_dir + "/pairs.drpp", &log);
      const std::string path = dpo_o.out_dir + "/dpo.drpc";
      lf::save_checkpoint(res.checkpoint, path);
      lf::log_info("wrote checkpoint " + path + " after " +
                   std::to_string(res.pairs_mined) + " pairs");
    } else if (eval_cmd->parsed()) {
      const lf::RunConfig cfg = resolve_config(eval_o);
      fs::create_directories(eval_o.out_dir);
      auto report = open_log(eval_o.out_dir + "/eval.jsonl");
      const auto rep = lf::run_eval(cfg, eval_ref, eval_gen, &report);
      std::cout << "fad " << rep.fad << "\nkl " << rep.kl << '\n';
    } else if (ablate_cmd->parsed()) {
      const lf::RunConfig cfg = resolve_config(ablate_o);
      const lf::Checkpoint ckpt = lf::load_checkpoint(ablate_ckpt);
      std::optional<lf::Dataset> data;
      if (!ablate_data.empty()) data = lf::load_dataset(ablate_data);
      fs::create_directories(ablate_o.out_dir);
      auto log = open_log(ablate_o.out_dir + "/train_dpo.log");
      const auto rows = lf::run_ablate(cfg, ckpt, data ? &*data : nullptr, &log);
      std::ofstream table(ablate_o.out_dir + "/ablation.tsv");
      lf::write_score_table(rows, table);
      lf::write_score_table(rows, std::cout);
    }
  } catch (const lf::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
