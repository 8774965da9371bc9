#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mim/autodiff.hpp"
#include "mim/encoders.hpp"
#include "mim/optim.hpp"
#include "mim/rng.hpp"

namespace mim {

struct InterestTriplet {
  uint64_t query_key;
  uint64_t pos_item_key;
  uint64_t hard_neg_key;
};

struct NegSamplingConfig {
  std::size_t N = 8;   // per-worker batch size
  std::size_t k = 3;   // retained past batches
  std::size_t P = 2;   // simulated workers
  double tau = 1.0;

  void validate() const {
    if (N < 1 || P < 1 || tau <= 0)
      throw std::invalid_argument("NegSamplingConfig: need N>=1, P>=1, tau>0");
  }
};

struct CsftLossWeights {
  double alpha = 0.5;
  double beta = 0.5;
};

// Category index over (item, category) pairs.
class CatalogIndex {
 public:
  void add(uint64_t item, uint32_t category) {
    category_of_[item] = category;
    members_[category].push_back(item);
  }

  bool contains(uint64_t item) const { return category_of_.count(item) > 0; }
  uint32_t category_of(uint64_t item) const { return category_of_.at(item); }

  const std::vector<uint64_t>& members(uint32_t category) const {
    static const std::vector<uint64_t> empty;
    auto it = members_.find(category);
    return it == members_.end() ? empty : it->second;
  }

 private:
  std::unordered_map<uint64_t, uint32_t> category_of_;
  std::map<uint32_t, std::vector<uint64_t>> members_;  // ordered for determinism
};

struct PurchaseRow {
  uint64_t query_key;
  uint64_t item_key;
};

struct TripletBuildResult {
  std::vector<InterestTriplet> triplets;
  std::size_t skipped_no_alternative = 0;
  std::vector<std::pair<PurchaseRow, std::string>> rejected;
};

// One triplet per purchase; hard negative drawn uniformly (seeded) from
// the positive's category, excluding the positive itself.
inline TripletBuildResult build_triplets(const std::vector<PurchaseRow>& purchases,
                                         const CatalogIndex& catalog, uint64_t seed) {
  TripletBuildResult out;
  Rng rng(hash_combine(seed, 0x7121b1e75ULL));
  for (const PurchaseRow& row : purchases) {
    if (!catalog.contains(row.item_key)) {
      out.rejected.push_back({row, "unknown item key"});
      continue;
    }
    const auto& cat = catalog.members(catalog.category_of(row.item_key));
    if (cat.size() < 2) {
      ++out.skipped_no_alternative;
      continue;
    }
    // rejection sample so the distribution over alternatives stays uniform
    uint64_t neg;
    do {
      neg = cat[rng.index(cat.size())];
    } while (neg == row.item_key);
    out.triplets.push_back({row.query_key, row.item_key, neg});
  }
  return out;
}

// Ring buffers of detached embedding bundles: per worker, the newest
// k+1 batches of (positive, hard negative) pairs.
class NegativePool {
 public:
  struct Entry {
    MMEmbeddingBundle pos;
    MMEmbeddingBundle neg;
  };
  using Batch = std::vector<Entry>;

  NegativePool(const NegSamplingConfig& cfg) : cfg_(cfg), workers_(cfg.P) {
    cfg.validate();
  }

  // Insert worker w's batch for the current step; newest at index 0.
  void push_batch(std::size_t worker, Batch batch) {
    auto& buf = workers_.at(worker);
    buf.push_front(std::move(batch));
    while (buf.size() > cfg_.k + 1) buf.pop_back();
  }

  std::size_t batches_held(std::size_t worker) const { return workers_.at(worker).size(); }

  struct Gathered {
    const MMEmbeddingBundle* bundle;
    std::size_t worker;
    std::size_t age;  // 0 = current batch
    std::size_t index_in_batch;
    bool is_positive;
  };

  // All positives and hard negatives from the newest batches of every
  // worker, excluding the anchor's own positive. Requires the current
  // batch of all P workers to be inserted already.
  std::vector<Gathered> gather(std::size_t anchor_worker, std::size_t anchor_index) const {
    if (anchor_worker >= workers_.size() || workers_[anchor_worker].empty() ||
        anchor_index >= workers_[anchor_worker].front().size())
      throw std::out_of_range("pool_gather: anchor index out of range");
    std::vector<Gathered> out;
    for (std::size_t w = 0; w < workers_.size(); ++w) {
      const auto& buf = workers_[w];
      for (std::size_t age = 0; age < buf.size(); ++age) {
        const Batch& batch = buf[age];
        for (std::size_t i = 0; i < batch.size(); ++i) {
          if (!(w == anchor_worker && age == 0 && i == anchor_index))
            out.push_back({&batch[i].pos, w, age, i, true});
          out.push_back({&batch[i].neg, w, age, i, false});
        }
      }
    }
    return out;
  }

  const NegSamplingConfig& config() const { return cfg_; }

 private:
  NegSamplingConfig cfg_;
  std::vector<std::deque<Batch>> workers_;
};

// InfoNCE with cosine logits. With include_positive (default) the
// positive term appears in the denominator, so the loss is >= 0; the
// literal variant sums only the negatives.
inline Var infonce(Tape& tape, Var anchor, Var positive, const std::vector<Var>& negatives,
                   double tau, bool include_positive = true) {
  if (tau <= 0) throw std::invalid_argument("infonce: tau must be > 0");
  Var pos_logit = tape.scale(tape.cosine(anchor, positive, "anchor", "positive"), 1.0 / tau);
  std::vector<Var> logits;
  if (include_positive) logits.push_back(pos_logit);
  for (std::size_t j = 0; j < negatives.size(); ++j) {
    std::string who = "negative[" + std::to_string(j) + "]";
    logits.push_back(
        tape.scale(tape.cosine(anchor, negatives[j], "anchor", who.c_str()), 1.0 / tau));
  }
  if (logits.empty()) return tape.sub(pos_logit, pos_logit);  // K=0 literal: degenerate 0
  return tape.sub(tape.log_sum_exp(tape.concat(logits)), pos_logit);
}

// Plain-value InfoNCE for callers that do not need gradients.
inline double infonce_value(const Tensor& anchor, const Tensor& positive,
                            const std::vector<Tensor>& negatives, double tau,
                            bool include_positive = true) {
  Tape tape;
  std::vector<Var> negs;
  for (const Tensor& n : negatives) negs.push_back(tape.constant(n));
  Var l = infonce(tape, tape.constant(anchor), tape.constant(positive), negs, tau,
                  include_positive);
  return tape.value(l)[0];
}

struct CsftBatchVars {
  std::vector<Var> query;                       // projected query embeddings, d_a
  std::vector<EncoderHead::BundleVars> pos;     // live positives
  std::vector<EncoderHead::BundleVars> neg;     // live hard negatives
};

enum class Level { Item, Txt, Img };

// Multi-level loss for one worker's batch:
//   L = L_q2item + alpha * L_q2txt + beta * L_q2img
// each level averaged over the batch, sharing one gathered negative set
// per anchor (h_mm / h_txt / h_img slot per level). Pool entries from
// other workers or past batches enter as detached constants.
inline Var csft_loss(Tape& tape, const CsftBatchVars& batch, const NegativePool& pool,
                     std::size_t worker, const CsftLossWeights& weights,
                     const NegSamplingConfig& cfg, bool include_positive = true) {
  auto slot_var = [&](const NegativePool::Gathered& g, Level level) -> Var {
    bool live = (g.worker == worker && g.age == 0);
    if (live) {
      const EncoderHead::BundleVars& bv =
          g.is_positive ? batch.pos[g.index_in_batch] : batch.neg[g.index_in_batch];
      switch (level) {
        case Level::Item: return bv.h_mm;
        case Level::Txt: return bv.h_txt;
        default: return bv.h_img;
      }
    }
    switch (level) {
      case Level::Item: return tape.constant(g.bundle->h_mm);
      case Level::Txt: return tape.constant(g.bundle->h_txt);
      default: return tape.constant(g.bundle->h_img);
    }
  };

  std::vector<Var> per_anchor;
  for (std::size_t a = 0; a < batch.query.size(); ++a) {
    auto gathered = pool.gather(worker, a);
    for (Level level : {Level::Item, Level::Txt, Level::Img}) {
      std::vector<Var> negs;
      negs.reserve(gathered.size());
      for (const auto& g : gathered) negs.push_back(slot_var(g, level));
      Var pos;
      switch (level) {
        case Level::Item: pos = batch.pos[a].h_mm; break;
        case Level::Txt: pos = batch.pos[a].h_txt; break;
        default: pos = batch.pos[a].h_img; break;
      }
      Var l = infonce(tape, batch.query[a], pos, negs, cfg.tau, include_positive);
      double w = level == Level::Item ? 1.0 : (level == Level::Txt ? weights.alpha : weights.beta);
      per_anchor.push_back(tape.scale(l, w / double(batch.query.size())));
    }
  }
  Var total = per_anchor[0];
  for (std::size_t i = 1; i < per_anchor.size(); ++i) total = tape.add(total, per_anchor[i]);
  return total;
}

struct CsftTrainConfig {
  NegSamplingConfig sampling;
  CsftLossWeights weights;
  std::size_t epochs = 1;
  double lr = 0.005;
  bool adam = false;  // plain SGD by default
  bool include_positive = true;
  uint64_t seed = 1;
};

struct CsftTrainResult {
  std::vector<double> loss_trajectory;  // one entry per synchronous step
};

// Synchronous multi-worker training over simulated shards. Per step:
// every worker's batch is encoded and inserted into the pool first;
// each worker then builds its own tape, gradients are summed in fixed
// worker order and applied once.
inline CsftTrainResult train_csft(const std::vector<InterestTriplet>& triplets,
                                  EncoderHead& head, const StubFeatureProvider& item_img,
                                  const StubFeatureProvider& item_txt,
                                  const StubFeatureProvider& query_img,
                                  const CsftTrainConfig& cfg) {
  if (triplets.empty()) throw std::invalid_argument("train_csft: empty triplet list");
  cfg.sampling.validate();
  const std::size_t N = cfg.sampling.N, P = cfg.sampling.P;
  Optimizer opt(cfg.adam ? Optimizer::Kind::Adam : Optimizer::Kind::Sgd, cfg.lr);
  opt.attach(head.parameters());

  std::vector<std::size_t> order(triplets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle_rng(hash_combine(cfg.seed, 0xc5f7ULL));

  CsftTrainResult result;
  std::size_t steps_per_epoch = std::max<std::size_t>(1, triplets.size() / (N * P));
  NegativePool pool(cfg.sampling);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates with our own rng, deterministic
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.index(i)]);

    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      // shard triplets; wrap around so every shard is full
      std::vector<std::vector<const InterestTriplet*>> shards(P);
      for (std::size_t w = 0; w < P; ++w)
        for (std::size_t i = 0; i < N; ++i) {
          std::size_t idx = (step * N * P + w * N + i) % order.size();
          shards[w].push_back(&triplets[order[idx]]);
        }

      // warm the pool with detached bundles from every worker
      for (std::size_t w = 0; w < P; ++w) {
        NegativePool::Batch batch;
        for (const InterestTriplet* t : shards[w])
          batch.push_back({head.encode_item(t->pos_item_key, item_img, item_txt),
                           head.encode_item(t->hard_neg_key, item_img, item_txt)});
        pool.push_batch(w, std::move(batch));
      }

      // per-worker forward/backward, fixed-order gradient summation
      std::vector<Tensor> summed;
      double step_loss = 0;
      for (std::size_t w = 0; w < P; ++w) {
        Tape tape;
        EncoderHead::TapeVars hv = head.register_on(tape, true);
        CsftBatchVars batch;
        for (const InterestTriplet* t : shards[w]) {
          batch.query.push_back(EncoderHead::project_image(
              tape, hv, tape.constant(query_img.provide(t->query_key))));
          batch.pos.push_back(EncoderHead::encode_item_vars(
              tape, hv, tape.constant(item_img.provide(t->pos_item_key)),
              tape.constant(item_txt.provide(t->pos_item_key))));
          batch.neg.push_back(EncoderHead::encode_item_vars(
              tape, hv, tape.constant(item_img.provide(t->hard_neg_key)),
              tape.constant(item_txt.provide(t->hard_neg_key))));
        }
        Var loss = csft_loss(tape, batch, pool, w, cfg.weights, cfg.sampling,
                             cfg.include_positive);
        tape.backward_scalar(loss);
        step_loss += tape.value(loss)[0];
        std::vector<Tensor> grads = EncoderHead::collect_gradients(tape, hv);
        if (summed.empty()) {
          summed = std::move(grads);
        } else {
          for (std::size_t i = 0; i < summed.size(); ++i)
            for (std::size_t j = 0; j < summed[i].size(); ++j)
              summed[i][j] += grads[i][j];
        }
      }
      opt.step(summed);
      result.loss_trajectory.push_back(step_loss / double(P));
    }
  }
  return result;
}

// --- file formats ---------------------------------------------------

inline void write_triplets(const std::string& path,
                           const std::vector<InterestTriplet>& triplets) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  for (const auto& t : triplets)
    f << t.query_key << '\t' << t.pos_item_key << '\t' << t.hard_neg_key << '\n';
}

inline std::vector<InterestTriplet> read_triplets(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<InterestTriplet> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    InterestTriplet t;
    if (std::sscanf(line.c_str(), "%llu\t%llu\t%llu",
                    (unsigned long long*)&t.query_key,
                    (unsigned long long*)&t.pos_item_key,
                    (unsigned long long*)&t.hard_neg_key) != 3)
      throw std::runtime_error("malformed triplet line: " + line);
    out.push_back(t);
  }
  return out;
}

// Versioned binary checkpoint: magic "MIMC", u32 version, u32 tensor
// count, then per tensor u32 rank + u32 dims + f64 data, little-endian.
class Checkpoint {
 public:
  static constexpr uint32_t kVersion = 1;

  static void save(const std::string& path, const EncoderHead& head) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    f.write("MIMC", 4);
    write_u32(f, kVersion);
    write_u32(f, uint32_t(head.dims_.d_img));
    write_u32(f, uint32_t(head.dims_.d_txt));
    write_u32(f, uint32_t(head.dims_.d_a));
    write_u32(f, uint32_t(head.dims_.d_mm));
    write_u32(f, uint32_t(head.dims_.mlp_hidden.size()));
    for (std::size_t h : head.dims_.mlp_hidden) write_u32(f, uint32_t(h));
    write_u32(f, head.dims_.use_tfn ? 1 : 0);
    auto params = head.parameters();
    write_u32(f, uint32_t(params.size()));
    for (const Tensor* p : params) {
      write_u32(f, uint32_t(p->rank()));
      for (std::size_t d : p->shape()) write_u32(f, uint32_t(d));
      f.write(reinterpret_cast<const char*>(p->data().data()),
              std::streamsize(p->size() * sizeof(double)));
    }
  }

  static EncoderHead load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (std::string(magic, 4) != "MIMC")
      throw std::runtime_error("bad checkpoint magic in " + path);
    if (read_u32(f) != kVersion) throw std::runtime_error("unsupported checkpoint version");
    EncoderDims dims;
    dims.d_img = read_u32(f);
    dims.d_txt = read_u32(f);
    dims.d_a = read_u32(f);
    dims.d_mm = read_u32(f);
    dims.mlp_hidden.resize(read_u32(f));
    for (auto& h : dims.mlp_hidden) h = read_u32(f);
    dims.use_tfn = read_u32(f) != 0;
    EncoderHead head = EncoderHead::zeros(dims);
    auto params = head.parameters();
    if (read_u32(f) != params.size()) throw std::runtime_error("checkpoint tensor count mismatch");
    for (Tensor* p : params) {
      uint32_t rank = read_u32(f);
      std::vector<std::size_t> shape(rank);
      for (auto& d : shape) d = read_u32(f);
      if (shape != p->shape()) throw std::runtime_error("checkpoint shape mismatch");
      f.read(reinterpret_cast<char*>(p->data().data()),
             std::streamsize(p->size() * sizeof(double)));
    }
    if (!f) throw std::runtime_error("truncated checkpoint " + path);
    return head;
  }

 private:
  static void write_u32(std::ofstream& f, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    f.write(reinterpret_cast<char*>(b), 4);
  }
  static uint32_t read_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
  }
};

}  // namespace mim
