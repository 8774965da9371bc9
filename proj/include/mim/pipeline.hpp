#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mim/config.hpp"
#include "mim/metrics.hpp"
#include "mim/repcenter.hpp"
#include "mim/synthdata.hpp"

namespace mim {

// --- stage functions: every stage is a pure function of (config, seed)
// plus its upstream artifacts --------------------------------------------

inline World build_world(const PipelineConfig& cfg, uint64_t seed) {
  WorldConfig wc = cfg.world;
  wc.seed = seed;
  return generate_catalog(wc, cfg.encoder.d_img, cfg.encoder.d_txt);
}

// Interest signal for C-SFT triplets. "purchase" uses the purchase log;
// "click" uses clicked CTR rows; "category" pairs a jittered item query
// with a same-category neighbor.
inline std::vector<PurchaseRow> build_signal_rows(const PipelineConfig& cfg, World& world,
                                                  const CtrDataset& ctr) {
  if (cfg.csft.signal == "purchase") return generate_purchase_log(world);
  if (cfg.csft.signal == "click") {
    std::vector<PurchaseRow> rows;
    for (const auto& s : ctr.samples)
      if (s.label == 1) rows.push_back({s.query_key, s.target_key});
    return rows;
  }
  // category signal
  Rng rng(hash_combine(world.cfg.seed, 0xca7e90ULL));
  std::vector<std::vector<const LatentItem*>> by_cat(world.cfg.n_categories);
  for (const auto& it : world.items) by_cat[it.category].push_back(&it);
  std::vector<PurchaseRow> rows;
  for (std::size_t p = 0; p < world.cfg.n_purchases; ++p) {
    const auto& cat = by_cat[rng.index(world.cfg.n_categories)];
    if (cat.size() < 2) continue;
    const LatentItem* src = cat[rng.index(cat.size())];
    Tensor zq = src->z;
    Tensor jitter = rng.gaussian_tensor({world.cfg.latent_dim}, world.cfg.query_noise);
    for (std::size_t d = 0; d < zq.size(); ++d) zq[d] += jitter[d];
    uint64_t qk = kQueryKeyBase + (1ULL << 33) + p;
    (*world.latents)[qk] = normalized(std::move(zq));
    rows.push_back({qk, cat[rng.index(cat.size())]->key});
  }
  return rows;
}

inline EncoderHead pretrain_dma_head(const PipelineConfig& cfg, const World& world,
                                     uint64_t seed) {
  EncoderHead head(cfg.encoder, hash_combine(seed, 0x4ead5ULL));
  std::vector<std::pair<Tensor, Tensor>> pairs;
  pairs.reserve(world.items.size());
  for (const auto& it : world.items)
    pairs.push_back({world.img_provider.provide(it.key), world.txt_provider.provide(it.key)});
  train_dma(head, pairs, cfg.dma.batch, cfg.dma.steps, cfg.dma.lr, cfg.dma.tau,
            hash_combine(seed, 0xd3aULL));
  return head;
}

inline CsftTrainResult run_csft(const PipelineConfig& cfg, const World& world,
                                const std::vector<InterestTriplet>& triplets,
                                EncoderHead& head, uint64_t seed) {
  CsftTrainConfig tc;
  tc.sampling = {cfg.csft.N, cfg.csft.k, cfg.csft.P, cfg.csft.tau};
  tc.weights = {cfg.csft.alpha, cfg.csft.beta};
  if (cfg.csft.loss_variant == "item_only") tc.weights = {0.0, 0.0};
  tc.include_positive = cfg.csft.loss_variant != "literal";
  tc.epochs = cfg.csft.epochs;
  tc.lr = cfg.csft.lr;
  tc.adam = cfg.csft.adam;
  tc.seed = hash_combine(seed, 0xc5f7aaULL);
  return train_csft(triplets, head, world.img_provider, world.txt_provider,
                    world.img_provider, tc);
}

// --- CTR training + evaluation -----------------------------------------

struct CtrEval {
  double auc_overall = 0;
  std::vector<double> auc_per_bucket;    // NaN where a bucket lacks both classes
  std::vector<double> auc_per_category;  // index = category id
  std::vector<double> epoch_loss;
  std::size_t n_train = 0;
  std::size_t n_eval = 0;
};

inline double auc_or_nan(const std::vector<double>& scores, const std::vector<int>& labels) {
  bool pos = false, neg = false;
  for (int l : labels) (l ? pos : neg) = true;
  if (!pos || !neg) return std::nan("");
  return auc(scores, labels);
}

inline CtrEval train_eval_ctr(const PipelineConfig& cfg, CtrVariant variant,
                              const World& world, const CtrDataset& data,
                              const MmLookup& mm, const QueryEmbLookup& query_emb,
                              uint64_t seed) {
  std::size_t n = data.samples.size();
  std::size_t n_eval = std::size_t(double(n) * cfg.eval.holdout_fraction);
  std::size_t n_train = n - n_eval;
  std::vector<BehaviorSample> train_pool(data.samples.begin(),
                                         data.samples.begin() + std::ptrdiff_t(n_train));
  std::vector<BehaviorSample> eval_pool(data.samples.begin() + std::ptrdiff_t(n_train),
                                        data.samples.end());

  // newest bucket is protected from training targets (cold-start probe)
  auto buckets = split_cold_start(world.items, cfg.eval.cold_start_buckets);
  std::vector<BehaviorSample> train = filter_training_targets(train_pool, buckets[0]);

  CtrModel model(cfg.ctr_dims(), variant, hash_combine(seed, 0xc13bULL));
  CtrTrainConfig tc;
  tc.epochs = cfg.ciubm.epochs;
  tc.lr = cfg.ciubm.lr;
  tc.batch_size = cfg.ciubm.batch;
  tc.adam = true;
  tc.seed = hash_combine(seed, 0x7c7ULL);

  CtrEval out;
  out.epoch_loss = train_ctr(train, model, mm, query_emb, tc);
  out.n_train = train.size();
  out.n_eval = eval_pool.size();

  std::vector<double> scores = score_dataset(eval_pool, model, mm, query_emb);
  std::vector<int> labels;
  labels.reserve(eval_pool.size());
  for (const auto& s : eval_pool) labels.push_back(s.label);
  out.auc_overall = auc(scores, labels);

  std::unordered_map<uint64_t, std::size_t> bucket_of;
  for (std::size_t b = 0; b < buckets.size(); ++b)
    for (uint64_t k : buckets[b]) bucket_of[k] = b;
  std::vector<std::vector<double>> bs(buckets.size());
  std::vector<std::vector<int>> bl(buckets.size());
  std::vector<std::vector<double>> cs(world.cfg.n_categories);
  std::vector<std::vector<int>> cl(world.cfg.n_categories);
  for (std::size_t i = 0; i < eval_pool.size(); ++i) {
    std::size_t b = bucket_of.at(eval_pool[i].target_key);
    bs[b].push_back(scores[i]);
    bl[b].push_back(labels[i]);
    uint32_t c = world.item_by_key(eval_pool[i].target_key).category;
    cs[c].push_back(scores[i]);
    cl[c].push_back(labels[i]);
  }
  for (std::size_t b = 0; b < buckets.size(); ++b)
    out.auc_per_bucket.push_back(auc_or_nan(bs[b], bl[b]));
  for (std::size_t c = 0; c < world.cfg.n_categories; ++c)
    out.auc_per_category.push_back(auc_or_nan(cs[c], cl[c]));
  return out;
}

// Shared lookups: frozen store for MM embeddings, cached query encodes.
struct ServingContext {
  std::unique_ptr<EmbeddingStore> store;
  EncoderHead head;
  const World* world = nullptr;
  mutable std::unordered_map<uint64_t, Tensor> query_cache;

  MmLookup mm_lookup() const {
    EmbeddingStore* s = store.get();
    return [s](uint64_t key) { return s->lookup_one(key); };
  }

  QueryEmbLookup query_lookup() const {
    return [this](uint64_t key) -> Tensor {
      auto it = query_cache.find(key);
      if (it != query_cache.end()) return it->second;
      Tensor q = head.encode_query(world->img_provider.provide(key));
      return query_cache.emplace(key, std::move(q)).first->second;
    };
  }
};

inline ServingContext make_serving_context(const PipelineConfig& cfg, const World& world,
                                           EncoderHead head) {
  ServingContext ctx;
  ctx.head = std::move(head);
  ctx.world = &world;
  ctx.store = std::make_unique<EmbeddingStore>(cfg.encoder.d_mm);
  std::vector<uint64_t> keys;
  keys.reserve(world.items.size());
  for (const auto& it : world.items) keys.push_back(it.key);
  precompute_table(*ctx.store, keys, ctx.head, world.img_provider, world.txt_provider);
  return ctx;
}

// --- full pipeline -------------------------------------------------------

inline json flop_table_json(const PipelineConfig& cfg, double foM_cost) {
  CtrDims dims = cfg.ctr_dims();
  std::size_t l = cfg.world.max_behaviors;
  json table = json::array();
  for (const char* name : {"base", "mim", "mim_no_rc", "mim_e2e"}) {
    FlopReport r = flop_account(flop_variant_from(name), l, dims, foM_cost);
    table.push_back({{"variant", name},
                     {"inference_total", r.inference.total()},
                     {"inference_encoder_fom", r.inference.encoder_fom},
                     {"inference_attention", r.inference.attention},
                     {"inference_deepctr", r.inference.deepctr},
                     {"train_total", r.train.total()},
                     {"train_encoder_fom", r.train.encoder_fom}});
  }
  return table;
}

// Synthetic per-item cost of one frozen foundation-model encode; stands
// in for a ViT/BERT forward, dwarfing the head on purpose.
constexpr double kFoMCost = 5.0e6;

struct PipelineResult {
  json report;
  double auc_base = 0;
  double auc_mim = 0;
};

inline PipelineResult run_pipeline(const PipelineConfig& cfg, uint64_t seed,
                                   bool with_ablations = true) {
  World world = build_world(cfg, seed);
  CtrDataset ctr = generate_ctr_dataset(world);
  std::vector<PurchaseRow> rows = build_signal_rows(cfg, world, ctr);
  TripletBuildResult triplets = build_triplets(rows, world.catalog_index(),
                                               hash_combine(seed, 0x321aULL));

  EncoderHead dma_head = pretrain_dma_head(cfg, world, seed);
  EncoderHead head = dma_head;  // C-SFT continues from the DMA head
  CsftTrainResult csft = run_csft(cfg, world, triplets.triplets, head, seed);

  ServingContext ctx = make_serving_context(cfg, world, head);
  MmLookup mm = ctx.mm_lookup();
  QueryEmbLookup qe = ctx.query_lookup();

  CtrEval base = train_eval_ctr(cfg, CtrVariant::base(), world, ctr, mm, qe, seed);
  CtrEval mim = train_eval_ctr(cfg, cfg.ctr_variant(), world, ctr, mm, qe, seed);

  json report;
  report["config"] = cfg.to_json();
  report["config_hash"] = config_hash_hex(cfg);
  report["seed"] = seed;
  report["data"] = {{"n_ctr_samples", ctr.samples.size()},
                    {"n_triplets", triplets.triplets.size()},
                    {"triplets_skipped", triplets.skipped_no_alternative},
                    {"oracle_auc", [&] {
                       std::vector<int> labels;
                       for (const auto& s : ctr.samples) labels.push_back(s.label);
                       return auc(ctr.true_click_prob, labels);
                     }()}};
  report["csft"] = {{"steps", csft.loss_trajectory.size()},
                    {"loss_first", csft.loss_trajectory.front()},
                    {"loss_last", csft.loss_trajectory.back()},
                    {"loss_trajectory", csft.loss_trajectory}};
  report["repcenter"] = {{"items", ctx.store->size()},
                         {"dim", ctx.store->dim()},
                         {"store_version", ctx.store->version()}};

  auto eval_json = [](const CtrEval& e) {
    json j = {{"auc", e.auc_overall},
              {"n_train", e.n_train},
              {"n_eval", e.n_eval},
              {"epoch_loss", e.epoch_loss}};
    json pb = json::array(), pc = json::array();
    for (double v : e.auc_per_bucket) pb.push_back(std::isnan(v) ? json() : json(v));
    for (double v : e.auc_per_category) pc.push_back(std::isnan(v) ? json() : json(v));
    j["auc_per_bucket"] = pb;
    j["auc_per_category"] = pc;
    return j;
  };
  report["ctr"] = {{"base", eval_json(base)}, {cfg.ciubm.variant, eval_json(mim)}};
  report["ctr"]["gain"] = mim.auc_overall - base.auc_overall;

  json gains = json::array();
  for (std::size_t b = 0; b < base.auc_per_bucket.size(); ++b) {
    double g = mim.auc_per_bucket[b] - base.auc_per_bucket[b];
    gains.push_back(std::isnan(g) ? json() : json(g));
  }
  report["cold_start_gain_per_bucket"] = gains;
  report["flops"] = flop_table_json(cfg, kFoMCost);

  if (with_ablations) {
    json table = json::array();
    auto add = [&](const std::string& name, double a) {
      table.push_back({{"variant", name}, {"auc", a}, {"gain", a - base.auc_overall}});
    };
    add("base", base.auc_overall);
    add("full_mim", mim.auc_overall);

    // encoder-side ablations retrain the head
    auto encoder_ablation = [&](const std::string& name, PipelineConfig acfg,
                                bool skip_csft) {
      World w = build_world(acfg, seed);
      CtrDataset actr = generate_ctr_dataset(w);
      std::vector<PurchaseRow> arows = build_signal_rows(acfg, w, actr);
      TripletBuildResult atrip =
          build_triplets(arows, w.catalog_index(), hash_combine(seed, 0x321aULL));
      EncoderHead ahead = pretrain_dma_head(acfg, w, seed);
      if (!skip_csft) run_csft(acfg, w, atrip.triplets, ahead, seed);
      ServingContext actx = make_serving_context(acfg, w, ahead);
      CtrEval e = train_eval_ctr(acfg, CtrVariant::mim(), w, actr, actx.mm_lookup(),
                                 actx.query_lookup(), seed);
      add(name, e.auc_overall);
    };

    {
      PipelineConfig a = cfg;
      a.encoder.use_tfn = false;
      encoder_ablation("wo_tfn", a, false);
    }
    {
      PipelineConfig a = cfg;
      a.csft.k = 0;
      a.csft.P = 1;  // in-batch negatives only
      encoder_ablation("wo_stnsg", a, false);
    }
    {
      PipelineConfig a = cfg;
      a.csft.loss_variant = "item_only";
      encoder_ablation("wo_multi_level", a, false);
    }
    encoder_ablation("wo_csft", cfg, true);

    // CiUBM module ablations reuse the trained head and store
    for (CtrVariant v : {CtrVariant::no_id(), CtrVariant::no_content(), CtrVariant::no_fusion()}) {
      CtrEval e = train_eval_ctr(cfg, v, world, ctr, mm, qe, seed);
      add(v.name, e.auc_overall);
    }
    report["ablations"] = table;
  }

  return {std::move(report), base.auc_overall, mim.auc_overall};
}

}  // namespace mim
