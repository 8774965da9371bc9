#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mim/ciubm.hpp"
#include "mim/encoders.hpp"
#include "mim/tensor.hpp"

namespace mim {

// f32 is the wire and store precision; quantizing at write time makes
// the direct and served paths produce identical values.
inline Tensor quantize_f32(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.data()) v = double(float(v));
  return out;
}

// Precomputed MM-embedding table. Many concurrent readers; writes are
// serialized through window flushes. Vectors are immutable once
// written for a given version, so lookups never observe torn values.
class EmbeddingStore {
 public:
  explicit EmbeddingStore(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }

  struct LookupEntry {
    Tensor vector;
    bool miss;
  };

  struct LookupResult {
    std::vector<LookupEntry> entries;  // request order preserved
    uint64_t version;
  };

  LookupResult lookup(const std::vector<uint64_t>& keys, bool strict = false) const {
    std::shared_lock lock(mu_);
    LookupResult r;
    r.version = version_;
    r.entries.reserve(keys.size());
    for (uint64_t k : keys) {
      auto it = table_.find(k);
      if (it == table_.end()) {
        if (strict)
          throw std::out_of_range("lookup: missing key " + std::to_string(k));
        r.entries.push_back({Tensor::zeros({dim_}), true});
      } else {
        Tensor t = Tensor::zeros({dim_});
        for (std::size_t i = 0; i < dim_; ++i) t[i] = double(it->second[i]);
        r.entries.push_back({std::move(t), false});
      }
    }
    return r;
  }

  MmView lookup_one(uint64_t key) const {
    LookupResult r = lookup({key});
    return {std::move(r.entries[0].vector), r.entries[0].miss};
  }

  // Atomic batch apply; bumps the store version exactly once.
  void apply_batch(const std::vector<std::pair<uint64_t, std::vector<float>>>& batch) {
    std::unique_lock lock(mu_);
    for (const auto& [k, v] : batch) {
      if (v.size() != dim_) throw std::invalid_argument("apply_batch: dim mismatch");
      table_[k] = v;
    }
    ++version_;
  }

  void put_direct(uint64_t key, const Tensor& value) {
    std::vector<float> f(value.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = float(value[i]);
    apply_batch({{key, std::move(f)}});
  }

  std::size_t size() const {
    std::shared_lock lock(mu_);
    return table_.size();
  }

  uint64_t version() const {
    std::shared_lock lock(mu_);
    return version_;
  }

  std::vector<std::pair<uint64_t, std::vector<float>>> snapshot_sorted() const {
    std::shared_lock lock(mu_);
    std::vector<std::pair<uint64_t, std::vector<float>>> out(table_.begin(), table_.end());
    std::sort(out.begin(), out.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
  }

 private:
  std::size_t dim_;
  mutable std::shared_mutex mu_;
  std::unordered_map<uint64_t, std::vector<float>> table_;
  uint64_t version_ = 0;
};

// RIM window: freshly encoded items buffer here and become visible
// only when a whole window flushes into the store.
class WindowBuffer {
 public:
  WindowBuffer(std::size_t max_count, long max_age_ms)
      : max_count_(max_count), max_age_ms_(max_age_ms) {}

  struct SubmitResult {
    bool flushed;
    std::size_t flushed_count;
  };

  SubmitResult submit(uint64_t key, const Tensor& value, EmbeddingStore& store) {
    std::vector<float> f(value.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = float(value[i]);
    std::unique_lock lock(mu_);
    if (pending_.empty()) first_pending_ = std::chrono::steady_clock::now();
    for (auto& [k, v] : pending_) {
      if (k == key) {  // duplicate within the window: last write wins
        v = std::move(f);
        ++duplicates_;
        return maybe_flush(store);
      }
    }
    pending_.push_back({key, std::move(f)});
    return maybe_flush(store);
  }

  std::size_t flush(EmbeddingStore& store) {
    std::unique_lock lock(mu_);
    return flush_locked(store);
  }

  // Age-based policy; called periodically by the serving loop.
  std::size_t flush_if_stale(EmbeddingStore& store) {
    std::unique_lock lock(mu_);
    if (pending_.empty()) return 0;
    auto age = std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::steady_clock::now() - first_pending_)
                   .count();
    if (age < max_age_ms_) return 0;
    return flush_locked(store);
  }

  std::size_t pending_count() const {
    std::unique_lock lock(mu_);
    return pending_.size();
  }
  std::size_t duplicate_count() const {
    std::unique_lock lock(mu_);
    return duplicates_;
  }

 private:
  SubmitResult maybe_flush(EmbeddingStore& store) {
    if (pending_.size() >= max_count_) return {true, flush_locked(store)};
    return {false, 0};
  }

  std::size_t flush_locked(EmbeddingStore& store) {
    if (pending_.empty()) return 0;
    std::size_t n = pending_.size();
    store.apply_batch(pending_);
    pending_.clear();
    return n;
  }

  std::size_t max_count_;
  long max_age_ms_;
  mutable std::mutex mu_;
  std::vector<std::pair<uint64_t, std::vector<float>>> pending_;
  std::chrono::steady_clock::time_point first_pending_;
  std::size_t duplicates_ = 0;
};

// RIM entry point: encode now, buffer until the window flushes.
inline WindowBuffer::SubmitResult rim_submit(WindowBuffer& window, EmbeddingStore& store,
                                             uint64_t key, const EncoderHead& head,
                                             const StubFeatureProvider& img,
                                             const StubFeatureProvider& txt) {
  MMEmbeddingBundle b = head.encode_item(key, img, txt);
  return window.submit(key, b.h_mm, store);
}

// One entry per catalog item, bit-identical to encode_item output
// modulo the f32 store precision.
inline void precompute_table(EmbeddingStore& store, const std::vector<uint64_t>& item_keys,
                             const EncoderHead& head, const StubFeatureProvider& img,
                             const StubFeatureProvider& txt) {
  std::vector<std::pair<uint64_t, std::vector<float>>> batch;
  batch.reserve(item_keys.size());
  for (uint64_t key : item_keys) {
    MMEmbeddingBundle b = head.encode_item(key, img, txt);
    std::vector<float> f(b.h_mm.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = float(b.h_mm[i]);
    batch.push_back({key, std::move(f)});
  }
  store.apply_batch(batch);
}

// --- store file: "MIMT", u32 version, u16 dim, u64 count, sorted
// (u64 key, dim x f32) records, little-endian ----------------------

inline void save_store(const std::string& path, const EmbeddingStore& store) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  auto rows = store.snapshot_sorted();
  f.write("MIMT", 4);
  uint32_t version = uint32_t(store.version());
  uint16_t dim = uint16_t(store.dim());
  uint64_t count = rows.size();
  f.write(reinterpret_cast<const char*>(&version), 4);
  f.write(reinterpret_cast<const char*>(&dim), 2);
  f.write(reinterpret_cast<const char*>(&count), 8);
  for (const auto& [k, v] : rows) {
    f.write(reinterpret_cast<const char*>(&k), 8);
    f.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * 4));
  }
  if (!f) throw std::runtime_error("write failure: " + path);
}

// Returned through a pointer because the store owns a mutex and is
// deliberately pinned in memory once readers exist.
inline std::unique_ptr<EmbeddingStore> load_store(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (std::string(magic, 4) != "MIMT") throw std::runtime_error("bad store magic in " + path);
  uint32_t version;
  uint16_t dim;
  uint64_t count;
  f.read(reinterpret_cast<char*>(&version), 4);
  f.read(reinterpret_cast<char*>(&dim), 2);
  f.read(reinterpret_cast<char*>(&count), 8);
  auto store = std::make_unique<EmbeddingStore>(dim);
  std::vector<std::pair<uint64_t, std::vector<float>>> batch;
  for (uint64_t i = 0; i < count; ++i) {
    uint64_t key;
    std::vector<float> v(dim);
    f.read(reinterpret_cast<char*>(&key), 8);
    f.read(reinterpret_cast<char*>(v.data()), std::streamsize(dim * 4));
    batch.push_back({key, std::move(v)});
  }
  if (!f) throw std::runtime_error("truncated store file " + path);
  store->apply_batch(batch);
  return store;
}

// --- analytic FLOP accounting ---------------------------------------

struct FlopLedger {
  double encoder_fom = 0;  // synthetic constant per live item encode
  double tfn = 0;
  double mlp = 0;
  double attention = 0;
  double deepctr = 0;
  double lookup = 0;  // table reads cost no compute

  double total() const { return encoder_fom + tfn + mlp + attention + deepctr + lookup; }
};

struct FlopReport {
  FlopLedger inference;  // per sample
  FlopLedger train;      // per sample; backward modeled as 2x forward
};

enum class FlopVariant { Base, Mim, MimNoRc, MimE2e };

inline FlopVariant flop_variant_from(const std::string& s) {
  if (s == "base") return FlopVariant::Base;
  if (s == "mim") return FlopVariant::Mim;
  if (s == "mim_no_rc") return FlopVariant::MimNoRc;
  if (s == "mim_e2e") return FlopVariant::MimE2e;
  throw std::invalid_argument("unknown flop variant: " + s);
}

inline double affine_flops(double in, double out) { return 2.0 * in * out; }

// Per-item encoder head cost (TFN fusion + MLP refinement), excluding
// the foundation-model constant.
inline FlopLedger encoder_head_flops(const EncoderDims& d) {
  FlopLedger l;
  if (d.use_tfn) l.tfn = double((d.d_a + 1) * (d.d_a + 1));  // one multiply per cell
  std::size_t in = d.fused_dim();
  l.mlp += affine_flops(double(d.d_img), double(d.d_a));  // DMA projections
  l.mlp += affine_flops(double(d.d_txt), double(d.d_a));
  for (std::size_t h : d.mlp_hidden) {
    l.mlp += affine_flops(double(in), double(h));
    in = h;
  }
  l.mlp += affine_flops(double(in), double(d.d_mm));
  return l;
}

// foM_cost is the synthetic per-item cost of one frozen foundation-model
// encode (the whole stub pipeline); live-encoding variants pay it for
// the l behaviors, the target, and the query.
inline FlopReport flop_account(FlopVariant variant, std::size_t behavior_len,
                               const CtrDims& dims, double foM_cost) {
  const double l = double(behavior_len);
  const double d_id = double(dims.d_id), d_mm = double(dims.d_mm);

  double attn_id = l * (2.0 * d_id)      // scaled-dot logits
                   + 3.0 * l             // softmax
                   + 2.0 * l * d_id;     // weighted sum
  double attn_content = l * (6.0 * d_mm)  // cosine: dot + two norms
                        + 2.0 * l * d_mm;
  double attn_fusion = 2.0 * l * d_id;

  CtrVariant cv = (variant == FlopVariant::Base) ? CtrVariant::base() : CtrVariant::mim();
  double dctr = 0;
  double in = double(dims.input_dim(cv));
  for (std::size_t h : dims.hidden) {
    dctr += affine_flops(in, double(h));
    in = double(h);
  }
  dctr += affine_flops(in, 1.0);

  FlopReport r;
  r.inference.attention = (variant == FlopVariant::Base)
                              ? attn_id
                              : attn_id + attn_content + attn_fusion;
  r.inference.deepctr = dctr;
  r.inference.lookup = 0;

  double live_encode = foM_cost * (l + 2.0);  // behaviors + target + query
  bool live = (variant == FlopVariant::MimNoRc || variant == FlopVariant::MimE2e);
  if (live) r.inference.encoder_fom = live_encode;

  // training: forward + backward, backward = 2x forward of the parts
  // that receive gradient; a frozen foM runs forward only
  double trainable_fwd = r.inference.attention + r.inference.deepctr;
  r.train.attention = 3.0 * r.inference.attention;
  r.train.deepctr = 3.0 * r.inference.deepctr;
  (void)trainable_fwd;
  if (variant == FlopVariant::MimNoRc) r.train.encoder_fom = live_encode;        // frozen
  if (variant == FlopVariant::MimE2e) r.train.encoder_fom = 3.0 * live_encode;   // trained
  return r;
}

}  // namespace mim
