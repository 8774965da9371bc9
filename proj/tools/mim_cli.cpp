// Command-line orchestrator: data generation, pre-training, C-SFT,
// representation-center builds, serving, CTR training, evaluation, and
// the full pipeline with its JSON run report.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "mim/pipeline.hpp"
#include "mim/server.hpp"

namespace fs = std::filesystem;
using namespace mim;

namespace {

constexpr int kExitInvalidConfig = 2;
constexpr int kExitMissingArtifact = 3;
constexpr int kExitInvariantBreach = 4;

struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Cli {
  std::string config_path;
  std::string out_root = "runs";
  uint64_t seed = 1;

  PipelineConfig config() const {
    if (config_path.empty()) {
      PipelineConfig c;
      c.validate();
      return c;
    }
    return PipelineConfig::load(config_path);
  }

  fs::path run_dir(const PipelineConfig& cfg) const {
    fs::path dir = fs::path(out_root) / (config_hash_hex(cfg) + "-" + std::to_string(seed));
    fs::create_directories(dir);
    return dir;
  }
};

void require_file(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p))
    throw MissingArtifact("missing artifact " + p.string() + " (run `" + producer + "` first)");
}

// Append-only report: read-modify-write one section.
void update_report(const fs::path& dir, const std::string& section, const json& value) {
  fs::path path = dir / "report.json";
  json report;
  if (fs::exists(path)) {
    std::ifstream f(path);
    f >> report;
  }
  report[section] = value;
  std::ofstream f(path);
  f << report.dump(2) << '\n';
}

void write_resolved_config(const fs::path& dir, const PipelineConfig& cfg, uint64_t seed) {
  json j = cfg.to_json();
  std::ofstream f(dir / "config.json");
  f << j.dump(2) << '\n';
  update_report(dir, "config", j);
  update_report(dir, "config_hash", config_hash_hex(cfg));
  update_report(dir, "seed", seed);
}

int cmd_gen_data(const Cli& cli) {
  PipelineConfig cfg = cli.config();
  fs::path dir = cli.run_dir(cfg);
  write_resolved_config(dir, cfg, cli.seed);

  World world = build_world(cfg, cli.seed);
  CtrDataset ctr = generate_ctr_dataset(world);
  auto rows = build_signal_rows(cfg, world, ctr);
  auto triplets = build_triplets(rows, world.catalog_index(), hash_combine(cli.seed, 0x321aULL));

  write_triplets((dir / "triplets.tsv").string(), triplets.triplets);
  write_ctr_dataset((dir / "ctr.tsv").string(), ctr.samples);

  std::vector<int> labels;
  for (const auto& s : ctr.samples) labels.push_back(s.label);
  update_report(dir, "data",
                {{"n_ctr_samples", ctr.samples.size()},
                 {"n_triplets", triplets.triplets.size()},
                 {"triplets_skipped", triplets.skipped_no_alternative},
                 {"oracle_auc", auc(ctr.true_click_prob, labels)}});
  std::cout << "gen-data: " << ctr.samples.size() << " ctr samples, "
            << triplets.triplets.size() << " triplets -> " << dir.string() << "\n";
  return 0;
}

int cmd_pretrain_dma(const Cli& cli) {
  PipelineConfig cfg = cli.config();
  fs::path dir = cli.run_dir(cfg);
  World world = build_world(cfg, cli.seed);
  EncoderHead head(cfg.encoder, hash_combine(cli.seed, 0x4ead5ULL));
  std::vector<std::pair<Tensor, Tensor>> pairs;
  for (const auto& it : world.items)
    pairs.push_back({world.img_provider.provide(it.key), world.txt_provider.provide(it.key)});
  auto traj = train_dma(head, pairs, cfg.dma.batch, cfg.dma.steps, cfg.dma.lr, cfg.dma.tau,
                        hash_combine(cli.seed, 0xd3aULL));
  Checkpoint::save((dir / "head_dma.ckpt").string(), head);
  update_report(dir, "dma",
                {{"steps", traj.size()}, {"loss_first", traj.front()}, {"loss_last", traj.back()}});
  std::cout << "pretrain-dma: loss " << traj.front() << " -> " << traj.back() << "\n";
  return 0;
}

int cmd_train_csft(const Cli& cli) {
  PipelineConfig cfg = cli.config();
  fs::path dir = cli.run_dir(cfg);
  require_file(dir / "triplets.tsv", "gen-data");
  require_file(dir / "head_dma.ckpt", "pretrain-dma");

  World world = build_world(cfg, cli.seed);
  CtrDataset ctr = generate_ctr_dataset(world);
  build_signal_rows(cfg, world, ctr);  // repopulates query latents for the triplet file
  auto triplets = read_triplets((dir / "triplets.tsv").string());
  EncoderHead head = Checkpoint::load((dir / "head_dma.ckpt").string());
  CsftTrainResult r = run_csft(cfg, world, triplets, head, cli.seed);
  Checkpoint::save((dir / "head.ckpt").string(), head);
  update_report(dir, "csft",
                {{"steps", r.loss_trajectory.size()},
                 {"loss_first", r.loss_trajectory.front()},
                 {"loss_last", r.loss_trajectory.back()},
                 {"loss_trajectory", r.loss_trajectory}});
  std::cout << "train-csft: loss " << r.loss_trajectory.front() << " -> "
            << r.loss_trajectory.back() << " over " << r.loss_trajectory.size() << " steps\n";
  return 0;
}

int cmd_build_repcenter(const Cli& cli) {
  PipelineConfig cfg = cli.config();
  fs::path dir = cli.run_dir(cfg);
  require_file(dir / "head.ckpt", "train-csft");
  World world = build_world(cfg, cli.seed);
  EncoderHead head = Checkpoint::load((dir / "head.ckpt").string());
  EmbeddingStore store(cfg.encoder.d_mm);
  std::vector<uint64_t> keys;
  for (const auto& it : world.items) keys.push_back(it.key);
  precompute_table(store, keys, head, world.img_provider, world.txt_provider);
  save_store((dir / "store.bin").string(), store);
  update_report(dir, "repcenter",
                {{"items", store.size()}, {"dim", store.dim()}, {"store_version", store.version()}});
  std::cout << "build-repcenter: " << store.size() << " vectors -> "
            << (dir / "store.bin").string() << "\n";
  return 0;
}

int cmd_serve_params(const Cli& cli, long duration_ms) {
  PipelineConfig cfg = cli.config();
  fs::path dir = cli.run_dir(cfg);
  require_file(dir / "store.bin", "build-repcenter");
  auto store = load_store((dir / "store.bin").string());
  WindowBuffer window(cfg.repcenter.window_count, cfg.repcenter.window_ms);

  std::string host = cfg.repcenter.bind;
  uint16_t port = 0;
  if (auto colon = host.rfind(':'); colon != std::string::npos) {
    port = uint16_t(std::stoi(host.substr(colon + 1)));
    host = host.substr(0, colon);
  }
  ParameterServer server(*store, window);
  server.start(host, port);
  std::cout << "serve-params: listening on " << host << ":" << server.port() << " with "
            << store->size() << " vectors\n"
            << std::flush;
  if (duration_ms <= 0) {
    while (true) std::this_thread::sleep_for(std::chrono::seconds(1));
  }
  std::this_thread::sleep_for(std::chrono::milliseconds(duration_ms));
  server.stop();
  return 0;
}

int cmd_train_ctr(const Cli& cli, const std::string& variant_override) {
  PipelineConfig cfg = cli.config();
  if (!variant_override.empty()) cfg.ciubm.variant = variant_override;
  cfg.validate();
  // run dir keyed by the unmodified config so every variant lands together
  fs::path dir = cli.run_dir(cli.config());
  require_file(dir / "ctr.tsv", "gen-data");
  require_file(dir / "store.bin", "build-repcenter");
  require_file(dir / "head.ckpt", "train-csft");

  World world = build_world(cfg, cli.seed);
  CtrDataset ctr;
  ctr.samples = read_ctr_dataset((dir / "ctr.tsv").string());
  generate_ctr_dataset(world);  // repopulate query latents referenced by ctr.tsv

  ServingContext ctx;
  ctx.head = Checkpoint::load((dir / "head.ckpt").string());
  ctx.world = &world;
  ctx.store = load_store((dir / "store.bin").string());

  CtrEval e = train_eval_ctr(cfg, cfg.ctr_variant(), world, ctr, ctx.mm_lookup(),
                             ctx.query_lookup(), cli.seed);
  json section;
  {
    fs::path rp = dir / "report.json";
    json report;
    if (fs::exists(rp)) {
      std::ifstream f(rp);
      f >> report;
    }
    section = report.value("ctr", json::object());
  }
  section[cfg.ciubm.variant] = {{"auc", e.auc_overall},
                                {"n_train", e.n_train},
                                {"n_eval", e.n_eval},
                                {"epoch_loss", e.epoch_loss}};
  update_report(dir, "ctr", section);
  std::cout << "train-ctr[" << cfg.ciubm.variant << "]: auc " << e.auc_overall << " ("
            << e.n_train << " train / " << e.n_eval << " eval)\n";
  return 0;
}

int cmd_eval(const Cli& cli) {
  PipelineConfig cfg = cli.config();
  fs::path dir = cli.run_dir(cfg);
  require_file(dir / "ctr.tsv", "gen-data");
  require_file(dir / "store.bin", "build-repcenter");
  require_file(dir / "head.ckpt", "train-csft");

  World world = build_world(cfg, cli.seed);
  CtrDataset ctr;
  ctr.samples = read_ctr_dataset((dir / "ctr.tsv").string());
  generate_ctr_dataset(world);

  ServingContext ctx;
  ctx.head = Checkpoint::load((dir / "head.ckpt").string());
  ctx.world = &world;
  ctx.store = load_store((dir / "store.bin").string());
  MmLookup mm = ctx.mm_lookup();
  QueryEmbLookup qe = ctx.query_lookup();

  CtrEval base = train_eval_ctr(cfg, CtrVariant::base(), world, ctr, mm, qe, cli.seed);
  CtrEval mim = train_eval_ctr(cfg, cfg.ctr_variant(), world, ctr, mm, qe, cli.seed);

  json gains = json::array();
  for (std::size_t b = 0; b < base.auc_per_bucket.size(); ++b) {
    double g = mim.auc_per_bucket[b] - base.auc_per_bucket[b];
    gains.push_back(std::isnan(g) ? json() : json(g));
  }
  update_report(dir, "eval",
                {{"auc_base", base.auc_overall},
                 {"auc_" + cfg.ciubm.variant, mim.auc_overall},
                 {"gain", mim.auc_overall - base.auc_overall},
                 {"cold_start_gain_per_bucket", gains}});
  std::cout << "eval: base " << base.auc_overall << " vs " << cfg.ciubm.variant << " "
            << mim.auc_overall << " (gain " << mim.auc_overall - base.auc_overall << ")\n";
  return 0;
}

int cmd_flops(const Cli& cli) {
  PipelineConfig cfg = cli.config();
  fs::path dir = cli.run_dir(cfg);
  json table = flop_table_json(cfg, kFoMCost);
  update_report(dir, "flops", table);
  std::printf("%-10s %18s %18s\n", "variant", "inference_flops", "train_flops");
  for (const auto& row : table)
    std::printf("%-10s %18.0f %18.0f\n", row["variant"].get<std::string>().c_str(),
                row["inference_total"].get<double>(), row["train_total"].get<double>());
  return 0;
}

int cmd_grad_check(const Cli&) {
  Rng rng(99);
  double worst = 0;
  for (int rep = 0; rep < 100; ++rep) {
    Tensor a = rng.uniform_tensor({4}, 0.2, 1.0);
    Tensor p = rng.uniform_tensor({4}, 0.2, 1.0);
    Tensor n1 = rng.uniform_tensor({4}, 0.2, 1.0);
    Tape tape;
    Var av = tape.input(a), pv = tape.input(p), nv = tape.input(n1);
    tape.backward_scalar(infonce(tape, av, pv, {nv}, 0.7));
    auto fd = finite_diff(
        [&](const std::vector<Tensor>& xs) {
          return infonce_value(xs[0], xs[1], {xs[2]}, 0.7);
        },
        {a, p, n1});
    worst = std::max({worst, max_rel_error(tape.gradient(av), fd[0]),
                      max_rel_error(tape.gradient(pv), fd[1]),
                      max_rel_error(tape.gradient(nv), fd[2])});
  }
  std::cout << "grad-check: max rel error " << worst << "\n";
  if (worst >= 1e-4) {
    std::cerr << "error class=invariant_breach msg=gradcheck failed\n";
    return kExitInvariantBreach;
  }
  return 0;
}

int cmd_pipeline(const Cli& cli, bool skip_ablations) {
  PipelineConfig cfg = cli.config();
  fs::path dir = cli.run_dir(cfg);
  PipelineResult r = run_pipeline(cfg, cli.seed, !skip_ablations);
  std::ofstream f(dir / "report.json");
  f << r.report.dump(2) << '\n';
  std::cout << "pipeline: base auc " << r.auc_base << ", " << cfg.ciubm.variant << " auc "
            << r.auc_mim << " -> " << (dir / "report.json").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MIM desk-scale pipeline"};
  app.require_subcommand(1);

  Cli cli;
  app.add_option("--config", cli.config_path, "JSON config file (defaults used if omitted)");
  app.add_option("--seed", cli.seed, "run seed");
  app.add_option("--out", cli.out_root, "root directory for run outputs");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic world and datasets");
  auto* dma = app.add_subcommand("pretrain-dma", "pre-train the modal-alignment projections");
  auto* csft = app.add_subcommand("train-csft", "contrastive fine-tuning of the encoder head");
  auto* repc = app.add_subcommand("build-repcenter", "precompute the embedding store");
  auto* serve = app.add_subcommand("serve-params", "serve the store over the wire protocol");
  long duration_ms = 0;
  serve->add_option("--duration-ms", duration_ms, "stop after this long (0 = run forever)");
  auto* ctr = app.add_subcommand("train-ctr", "train and evaluate one CTR variant");
  std::string variant_override;
  ctr->add_option("--variant", variant_override, "override ciubm.variant");
  auto* ev = app.add_subcommand("eval", "evaluate base vs configured variant with cold-start splits");
  auto* flops = app.add_subcommand("flops", "print the analytic FLOP table");
  auto* grad = app.add_subcommand("grad-check", "finite-difference spot check");
  auto* pipe = app.add_subcommand("pipeline", "run every stage and write the full report");
  bool skip_ablations = false;
  pipe->add_flag("--skip-ablations", skip_ablations, "omit the ablation table");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(cli);
    if (dma->parsed()) return cmd_pretrain_dma(cli);
    if (csft->parsed()) return cmd_train_csft(cli);
    if (repc->parsed()) return cmd_build_repcenter(cli);
    if (serve->parsed()) return cmd_serve_params(cli, duration_ms);
    if (ctr->parsed()) return cmd_train_ctr(cli, variant_override);
    if (ev->parsed()) return cmd_eval(cli);
    if (flops->parsed()) return cmd_flops(cli);
    if (grad->parsed()) return cmd_grad_check(cli);
    if (pipe->parsed()) return cmd_pipeline(cli, skip_ablations);
  } catch (const ConfigError& e) {
    std::cerr << "error class=invalid_config msg=" << e.what() << "\n";
    return kExitInvalidConfig;
  } catch (const MissingArtifact& e) {
    std::cerr << "error class=missing_artifact msg=" << e.what() << "\n";
    return kExitMissingArtifact;
  } catch (const std::exception& e) {
    std::cerr << "error class=invariant_breach msg=" << e.what() << "\n";
    return kExitInvariantBreach;
  }
  return 0;
}
