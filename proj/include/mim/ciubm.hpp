#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mim/autodiff.hpp"
#include "mim/encoders.hpp"
#include "mim/optim.hpp"
#include "mim/rng.hpp"

namespace mim {

// Trainable item-id embeddings, auto-initialized on first touch from a
// per-key seed so the values do not depend on touch order.
class IdEmbeddingTable {
 public:
  IdEmbeddingTable(std::size_t dim, uint64_t seed) : dim_(dim), seed_(seed) {}

  Tensor& get_or_init(uint64_t key) {
    auto it = table_.find(key);
    if (it != table_.end()) return it->second;
    Rng rng(hash_combine(seed_, key));
    double bound = 1.0 / std::sqrt(double(dim_));
    return table_.emplace(key, rng.uniform_tensor({dim_}, -bound, bound)).first->second;
  }

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return table_.size(); }

 private:
  std::size_t dim_;
  uint64_t seed_;
  std::unordered_map<uint64_t, Tensor> table_;
};

struct BehaviorSample {
  uint64_t user_key;
  uint64_t query_key;
  uint64_t target_key;
  std::vector<uint64_t> behavior_keys;  // valid entries only, length <= max_len
  int label;                            // {0,1}
};

// Frozen MM embedding source (representation center or direct encode).
struct MmView {
  Tensor h_mm;
  bool miss;
};
using MmLookup = std::function<MmView(uint64_t)>;

struct CtrVariant {
  std::string name = "base+mim";
  bool id_interest = true;
  bool content_interest = true;
  bool fusion_interest = true;

  static CtrVariant base() { return {"base", true, false, false}; }
  static CtrVariant mim() { return {"base+mim", true, true, true}; }
  static CtrVariant no_id() { return {"wo_id_interest", false, true, true}; }
  static CtrVariant no_content() { return {"wo_content_interest", true, false, true}; }
  static CtrVariant no_fusion() { return {"wo_fusion_interest", true, true, false}; }
  bool uses_mm() const { return content_interest || fusion_interest; }
};

struct CtrDims {
  std::size_t d_id = 16;
  std::size_t d_user = 8;
  std::size_t d_query = 16;  // must equal encoder d_a
  std::size_t d_mm = 16;
  std::size_t max_len = 16;
  std::vector<std::size_t> hidden = {64, 32};

  // behavior pooling block + fixed side features
  std::size_t input_dim(const CtrVariant& v) const {
    std::size_t d = 0;
    if (v.id_interest) d += d_id;
    if (v.content_interest) d += d_mm;
    if (v.fusion_interest) d += d_id;
    d += d_user + d_query + d_id + d_mm + 1;  // user, query, target id, target mm, miss flag
    return d;
  }
};

// --- attention pooling primitives (tape level) -----------------------

struct IdInterestResult {
  Var pooled;
  bool all_masked = false;
};

// Scaled-dot-product softmax attention over unmasked behavior ID
// embeddings; weights sum to 1 over unmasked positions.
inline IdInterestResult id_interest(Tape& tape, Var target, const std::vector<Var>& behaviors,
                                    const std::vector<bool>& mask) {
  std::size_t d = tape.value(target).size();
  std::vector<Var> logits;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < behaviors.size(); ++i) {
    if (!mask[i]) continue;
    logits.push_back(tape.scale(tape.dot_product(target, behaviors[i]), 1.0 / std::sqrt(double(d))));
    idx.push_back(i);
  }
  if (idx.empty())
    return {tape.constant(Tensor::zeros({d})), true};
  Var alphas = tape.softmax(tape.concat(logits));
  Var pooled = tape.smul(tape.select(alphas, 0), behaviors[idx[0]]);
  for (std::size_t j = 1; j < idx.size(); ++j)
    pooled = tape.add(pooled, tape.smul(tape.select(alphas, j), behaviors[idx[j]]));
  return {pooled, false};
}

struct ContentInterestResult {
  std::vector<Var> alpha;        // scalar cosine per unmasked behavior
  std::vector<std::size_t> idx;  // behavior index per alpha entry
  Var pooled;                    // sum alpha_i * h_mm_i
  std::size_t length = 0;        // original behavior count
};

// Raw cosine weights against the target MM embedding, no softmax; the
// pooled vector is not a convex combination by design of the weighting.
inline ContentInterestResult content_interest(Tape& tape, Var target_mm,
                                              const std::vector<Var>& behavior_mm,
                                              const std::vector<bool>& mask) {
  ContentInterestResult r;
  r.length = behavior_mm.size();
  std::size_t d = tape.value(target_mm).size();
  for (std::size_t i = 0; i < behavior_mm.size(); ++i) {
    if (!mask[i]) continue;
    std::string who = "behavior_mm[" + std::to_string(i) + "]";
    r.alpha.push_back(tape.cosine(target_mm, behavior_mm[i], "target_mm", who.c_str()));
    r.idx.push_back(i);
  }
  if (r.idx.empty()) {
    r.pooled = tape.constant(Tensor::zeros({d}));
    return r;
  }
  r.pooled = tape.smul(r.alpha[0], behavior_mm[r.idx[0]]);
  for (std::size_t j = 1; j < r.idx.size(); ++j)
    r.pooled = tape.add(r.pooled, tape.smul(r.alpha[j], behavior_mm[r.idx[j]]));
  return r;
}

// Reuses the exact alpha nodes from content_interest to weight ID
// embeddings (the same Vars, not recomputed values).
inline Var fusion_interest(Tape& tape, const ContentInterestResult& content,
                           const std::vector<Var>& behavior_id, std::size_t d_id) {
  if (content.length != behavior_id.size())
    throw std::invalid_argument("fusion_interest: alpha/behavior length mismatch");
  if (content.idx.empty()) return tape.constant(Tensor::zeros({d_id}));
  Var pooled = tape.smul(content.alpha[0], behavior_id[content.idx[0]]);
  for (std::size_t j = 1; j < content.idx.size(); ++j)
    pooled = tape.add(pooled, tape.smul(content.alpha[j], behavior_id[content.idx[j]]));
  return pooled;
}

// --- model -----------------------------------------------------------

class CtrModel {
 public:
  CtrModel(CtrDims dims, CtrVariant variant, uint64_t seed)
      : dims_(dims),
        variant_(variant),
        id_table_(dims.d_id, hash_combine(seed, 0x1dULL)),
        user_table_(dims.d_user, hash_combine(seed, 0x05e2ULL)) {
    Rng rng(hash_combine(seed, 0xdeec72ULL));
    std::size_t in = dims.input_dim(variant);
    for (std::size_t h : dims.hidden) {
      deepctr_.push_back(AffineParams::init(h, in, rng));
      in = h;
    }
    deepctr_.push_back(AffineParams::init(1, in, rng));
  }

  const CtrDims& dims() const { return dims_; }
  const CtrVariant& variant() const { return variant_; }
  IdEmbeddingTable& id_table() { return id_table_; }

  static constexpr std::size_t kUserBuckets = 4096;
  static uint64_t user_bucket(uint64_t user_key) {
    uint64_t s = user_key ^ 0xb0cceedULL;
    return splitmix64(s) % kUserBuckets;
  }

  // Per-batch tape context: deepCTR layers registered once, embedding
  // vars registered lazily per touched key.
  struct TapeCtx {
    Tape* tape;
    bool train;
    std::vector<std::pair<Var, Var>> layers;
    std::unordered_map<uint64_t, Var> id_vars;
    std::unordered_map<uint64_t, Var> user_vars;
  };

  TapeCtx begin_batch(Tape& tape, bool train) {
    TapeCtx ctx{&tape, train, {}, {}, {}};
    for (auto& l : deepctr_)
      ctx.layers.push_back({tape.input(l.W, train), tape.input(l.b, train)});
    return ctx;
  }

  Var id_var(TapeCtx& ctx, uint64_t key) {
    auto it = ctx.id_vars.find(key);
    if (it != ctx.id_vars.end()) return it->second;
    Var v = ctx.tape->input(id_table_.get_or_init(key), ctx.train);
    ctx.id_vars.emplace(key, v);
    return v;
  }

  Var user_var(TapeCtx& ctx, uint64_t user_key) {
    uint64_t bucket = user_bucket(user_key);
    auto it = ctx.user_vars.find(bucket);
    if (it != ctx.user_vars.end()) return it->second;
    Var v = ctx.tape->input(user_table_.get_or_init(bucket), ctx.train);
    ctx.user_vars.emplace(bucket, v);
    return v;
  }

  struct Forward {
    Var logit;
    double score;  // sigmoid(logit)
    Tensor alpha_mm;  // length max_len, zeros at masked/missing slots
    bool target_mm_miss = false;
  };

  // Full pipeline: behavior pooling per variant, fixed side features
  // (user emb, query emb, target id emb, target mm, miss flag), deepCTR.
  Forward forward(TapeCtx& ctx, const BehaviorSample& sample, const MmLookup& mm,
                  const Tensor& query_emb) {
    Tape& tape = *ctx.tape;
    if (sample.behavior_keys.size() > dims_.max_len)
      throw std::invalid_argument("behavior sequence exceeds max_len");
    if (query_emb.size() != dims_.d_query)
      throw std::invalid_argument("query embedding dim mismatch");

    std::size_t l = sample.behavior_keys.size();
    std::vector<Var> behav_id;
    std::vector<Var> behav_mm;
    std::vector<bool> id_mask(l, true);
    std::vector<bool> mm_mask(l, false);
    bool need_mm = variant_.uses_mm();
    for (std::size_t i = 0; i < l; ++i) {
      behav_id.push_back(id_var(ctx, sample.behavior_keys[i]));
      if (need_mm) {
        MmView v = mm(sample.behavior_keys[i]);
        // items absent from the store contribute nothing to content pooling
        mm_mask[i] = !v.miss && v.h_mm.norm() > 0;
        behav_mm.push_back(tape.constant(mm_mask[i] ? v.h_mm : Tensor::zeros({dims_.d_mm})));
      }
    }

    Var target_id = id_var(ctx, sample.target_key);
    MmView target_mm{Tensor::zeros({dims_.d_mm}), true};
    if (need_mm || true) target_mm = mm(sample.target_key);

    Forward out;
    out.target_mm_miss = target_mm.miss;
    out.alpha_mm = Tensor::zeros({dims_.max_len});

    std::vector<Var> blocks;
    if (variant_.id_interest)
      blocks.push_back(id_interest(tape, target_id, behav_id, id_mask).pooled);

    if (need_mm) {
      if (target_mm.miss || target_mm.h_mm.norm() == 0) {
        // no usable target content: content and fusion pool to zero
        if (variant_.content_interest)
          blocks.push_back(tape.constant(Tensor::zeros({dims_.d_mm})));
        if (variant_.fusion_interest)
          blocks.push_back(tape.constant(Tensor::zeros({dims_.d_id})));
      } else {
        Var t_mm = tape.constant(target_mm.h_mm);
        ContentInterestResult content = content_interest(tape, t_mm, behav_mm, mm_mask);
        for (std::size_t j = 0; j < content.idx.size(); ++j)
          out.alpha_mm[content.idx[j]] = tape.value(content.alpha[j])[0];
        if (variant_.content_interest) blocks.push_back(content.pooled);
        if (variant_.fusion_interest)
          blocks.push_back(fusion_interest(tape, content, behav_id, dims_.d_id));
      }
    }

    blocks.push_back(user_var(ctx, sample.user_key));
    blocks.push_back(tape.constant(query_emb));
    blocks.push_back(target_id);
    blocks.push_back(tape.constant(target_mm.miss ? Tensor::zeros({dims_.d_mm})
                                                  : target_mm.h_mm));
    blocks.push_back(tape.constant(Tensor::scalar(target_mm.miss ? 1.0 : 0.0)));

    Var x = tape.concat(blocks);
    for (std::size_t i = 0; i < ctx.layers.size(); ++i) {
      x = tape.affine(ctx.layers[i].first, x, ctx.layers[i].second);
      if (i + 1 < ctx.layers.size()) x = tape.relu(x);
    }
    out.logit = tape.select(x, 0);
    out.score = Tape::sigmoid_value(tape.value(out.logit)[0]);
    return out;
  }

  double score(const BehaviorSample& sample, const MmLookup& mm, const Tensor& query_emb) {
    Tape tape;
    TapeCtx ctx = begin_batch(tape, false);
    return forward(ctx, sample, mm, query_emb).score;
  }

  std::vector<Tensor*> dense_parameters() {
    std::vector<Tensor*> ps;
    for (auto& l : deepctr_) {
      ps.push_back(&l.W);
      ps.push_back(&l.b);
    }
    return ps;
  }

  // Apply embedding gradients sorted by key so the update order never
  // depends on hash-map iteration.
  void apply_embedding_grads(const Tape& tape, const TapeCtx& ctx, double lr) {
    std::vector<std::pair<uint64_t, const Var*>> keys;
    for (auto& kv : ctx.id_vars) keys.push_back({kv.first, &kv.second});
    std::sort(keys.begin(), keys.end(),
              [](auto& a, auto& b) { return a.first < b.first; });
    for (auto& [key, var] : keys) {
      Tensor g = tape.gradient(*var);
      Tensor& e = id_table_.get_or_init(key);
      for (std::size_t i = 0; i < e.size(); ++i) e[i] -= lr * g[i];
    }
    keys.clear();
    for (auto& kv : ctx.user_vars) keys.push_back({kv.first, &kv.second});
    std::sort(keys.begin(), keys.end(),
              [](auto& a, auto& b) { return a.first < b.first; });
    for (auto& [key, var] : keys) {
      Tensor g = tape.gradient(*var);
      Tensor& e = user_table_.get_or_init(key);
      for (std::size_t i = 0; i < e.size(); ++i) e[i] -= lr * g[i];
    }
  }

 private:
  CtrDims dims_;
  CtrVariant variant_;
  IdEmbeddingTable id_table_;
  IdEmbeddingTable user_table_;  // keyed by hashed user bucket
  std::vector<AffineParams> deepctr_;
};

using QueryEmbLookup = std::function<Tensor(uint64_t)>;

struct CtrTrainConfig {
  std::size_t epochs = 1;
  double lr = 0.005;
  std::size_t batch_size = 64;
  bool adam = true;
  uint64_t seed = 1;
};

// Mini-batch BCE training. MM embeddings arrive through the lookup and
// are frozen; dense layers use Adam (or SGD), embedding tables plain SGD.
inline std::vector<double> train_ctr(const std::vector<BehaviorSample>& dataset,
                                     CtrModel& model, const MmLookup& mm,
                                     const QueryEmbLookup& query_emb,
                                     const CtrTrainConfig& cfg) {
  if (dataset.empty()) throw std::invalid_argument("train_ctr: empty dataset");
  for (const auto& s : dataset)
    if (s.label != 0 && s.label != 1)
      throw std::invalid_argument("train_ctr: labels must be in {0,1}");
  Optimizer opt(cfg.adam ? Optimizer::Kind::Adam : Optimizer::Kind::Sgd, cfg.lr);
  opt.attach(model.dense_parameters());
  Rng shuffle_rng(hash_combine(cfg.seed, 0xc72ULL));
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<double> epoch_losses;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.index(i)]);
    double total = 0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Tape tape;
      CtrModel::TapeCtx ctx = model.begin_batch(tape, true);
      std::vector<Var> losses;
      for (std::size_t i = start; i < end; ++i) {
        const BehaviorSample& s = dataset[order[i]];
        CtrModel::Forward f = model.forward(ctx, s, mm, query_emb(s.query_key));
        losses.push_back(tape.bce_with_logits(f.logit, double(s.label)));
      }
      Var loss = tape.mean(tape.concat(losses));
      tape.backward_scalar(loss);
      total += tape.value(loss)[0] * double(end - start);
      count += end - start;
      std::vector<Tensor> grads;
      for (auto& l : ctx.layers) {
        grads.push_back(tape.gradient(l.first));
        grads.push_back(tape.gradient(l.second));
      }
      opt.step(grads);
      model.apply_embedding_grads(tape, ctx, cfg.lr);
    }
    epoch_losses.push_back(total / double(count));
  }
  return epoch_losses;
}

inline std::vector<double> score_dataset(const std::vector<BehaviorSample>& dataset,
                                         CtrModel& model, const MmLookup& mm,
                                         const QueryEmbLookup& query_emb) {
  std::vector<double> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset) out.push_back(model.score(s, mm, query_emb(s.query_key)));
  return out;
}

// --- dataset file: user, query, target, comma-joined behaviors, label

inline void write_ctr_dataset(const std::string& path,
                              const std::vector<BehaviorSample>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  for (const auto& s : rows) {
    f << s.user_key << '\t' << s.query_key << '\t' << s.target_key << '\t';
    for (std::size_t i = 0; i < s.behavior_keys.size(); ++i)
      f << (i ? "," : "") << s.behavior_keys[i];
    f << '\t' << s.label << '\n';
  }
}

inline std::vector<BehaviorSample> read_ctr_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<BehaviorSample> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 5) throw std::runtime_error("malformed dataset line: " + line);
    BehaviorSample s;
    s.user_key = std::stoull(fields[0]);
    s.query_key = std::stoull(fields[1]);
    s.target_key = std::stoull(fields[2]);
    std::istringstream bs(fields[3]);
    std::string tok;
    while (std::getline(bs, tok, ','))
      if (!tok.empty()) s.behavior_keys.push_back(std::stoull(tok));
    s.label = std::stoi(fields[4]);
    out.push_back(s);
  }
  return out;
}

}  // namespace mim
