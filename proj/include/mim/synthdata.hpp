#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mim/ciubm.hpp"
#include "mim/csft.hpp"
#include "mim/encoders.hpp"
#include "mim/rng.hpp"
#include "mim/tensor.hpp"

namespace mim {

struct WorldConfig {
  std::size_t n_items = 2000;
  std::size_t n_users = 500;
  std::size_t n_categories = 20;
  std::size_t latent_dim = 8;
  std::size_t n_ctr_samples = 50000;
  std::size_t n_purchases = 4000;
  std::size_t max_behaviors = 16;
  double content_weight = 5.0;    // w_c in the click model
  double popularity_weight = 1.0; // w_p
  double noise_scale = 0.3;       // click-logit noise
  double feature_noise = 0.3;     // stub-feature noise relative to signal
  double query_noise = 0.8;       // latent jitter between query and its source
  uint64_t seed = 1;

  void validate() const {
    if (n_items < 1 || n_users < 1 || n_categories < 1 || latent_dim < 1)
      throw std::invalid_argument("WorldConfig: counts must be >= 1");
    if (content_weight < 0 || popularity_weight < 0)
      throw std::invalid_argument("WorldConfig: weights must be >= 0");
  }
};

struct LatentItem {
  uint64_t key;
  uint32_t category;
  Tensor z;  // unit norm
  uint64_t birth_time;
  double popularity;  // centered in [-1, 1]
};

// Key spaces: items are small integers, queries and users live in
// disjoint high ranges so ids never collide.
constexpr uint64_t kQueryKeyBase = 1ULL << 40;
constexpr uint64_t kUserKeyBase = 1ULL << 41;

inline Tensor normalized(Tensor t) {
  double n = t.norm();
  if (n == 0) throw std::invalid_argument("normalized: zero vector");
  for (double& v : t.data()) v /= n;
  return t;
}

class World {
 public:
  WorldConfig cfg;
  std::vector<LatentItem> items;
  std::vector<Tensor> category_centroids;
  std::vector<Tensor> user_interest;  // index = user, key = kUserKeyBase + index
  // shared latent table: items + generated queries
  std::shared_ptr<std::unordered_map<uint64_t, Tensor>> latents;
  StubFeatureProvider img_provider{Modality::Image, 32, 0};
  StubFeatureProvider txt_provider{Modality::Text, 32, 0};

  const LatentItem& item_by_key(uint64_t key) const { return items.at(key - 1); }

  CatalogIndex catalog_index() const {
    CatalogIndex idx;
    for (const auto& it : items) idx.add(it.key, it.category);
    return idx;
  }
};

// Everything below is a pure function of WorldConfig.
inline World generate_catalog(const WorldConfig& cfg, std::size_t d_img = 32,
                              std::size_t d_txt = 32) {
  cfg.validate();
  World w;
  w.cfg = cfg;
  Rng rng(hash_combine(cfg.seed, 0x3017dULL));

  for (std::size_t c = 0; c < cfg.n_categories; ++c)
    w.category_centroids.push_back(normalized(rng.gaussian_tensor({cfg.latent_dim})));

  w.latents = std::make_shared<std::unordered_map<uint64_t, Tensor>>();
  for (std::size_t i = 0; i < cfg.n_items; ++i) {
    LatentItem it;
    it.key = uint64_t(i) + 1;
    it.category = uint32_t(i % cfg.n_categories);
    Tensor z = w.category_centroids[it.category];
    Tensor jitter = rng.gaussian_tensor({cfg.latent_dim}, 0.5);
    for (std::size_t d = 0; d < z.size(); ++d) z[d] += jitter[d];
    it.z = normalized(std::move(z));
    it.birth_time = rng.next_u64() % 1000000;
    it.popularity = rng.uniform(-1.0, 1.0);
    (*w.latents)[it.key] = it.z;
    w.items.push_back(std::move(it));
  }

  for (std::size_t u = 0; u < cfg.n_users; ++u)
    w.user_interest.push_back(normalized(rng.gaussian_tensor({cfg.latent_dim})));

  // stub features are noisy seeded linear views of the latent z
  w.img_provider = StubFeatureProvider(Modality::Image, d_img, cfg.seed);
  w.txt_provider = StubFeatureProvider(Modality::Text, d_txt, cfg.seed);
  w.img_provider.wire_latents(w.latents, cfg.latent_dim, cfg.feature_noise);
  w.txt_provider.wire_latents(w.latents, cfg.latent_dim, cfg.feature_noise);
  return w;
}

// Purchase log for C-SFT: each query's latent sits near the purchased
// item; the purchase is drawn within one category by content affinity
// (argmax in the w_c -> infinity limit).
inline std::vector<PurchaseRow> generate_purchase_log(World& world) {
  const WorldConfig& cfg = world.cfg;
  Rng rng(hash_combine(cfg.seed, 0x9c4a5eULL));
  std::vector<std::vector<const LatentItem*>> by_cat(cfg.n_categories);
  for (const auto& it : world.items) by_cat[it.category].push_back(&it);

  std::vector<PurchaseRow> rows;
  for (std::size_t p = 0; p < cfg.n_purchases; ++p) {
    const auto& cat = by_cat[rng.index(cfg.n_categories)];
    if (cat.empty()) continue;
    const LatentItem* source = cat[rng.index(cat.size())];
    Tensor zq = source->z;
    Tensor jitter = rng.gaussian_tensor({cfg.latent_dim}, cfg.query_noise);
    for (std::size_t d = 0; d < zq.size(); ++d) zq[d] += jitter[d];
    zq = normalized(std::move(zq));

    const LatentItem* purchased = nullptr;
    if (std::isinf(cfg.content_weight)) {
      double best = -2;
      for (const LatentItem* it : cat) {
        double c = cosine(zq, it->z);
        if (c > best) {
          best = c;
          purchased = it;
        }
      }
    } else {
      std::vector<double> wts(cat.size());
      double mx = -1e300;
      for (std::size_t i = 0; i < cat.size(); ++i) {
        wts[i] = cfg.content_weight * cosine(zq, cat[i]->z);
        mx = std::max(mx, wts[i]);
      }
      double sum = 0;
      for (double& v : wts) sum += (v = std::exp(v - mx));
      double r = rng.uniform() * sum, acc = 0;
      purchased = cat.back();
      for (std::size_t i = 0; i < cat.size(); ++i) {
        acc += wts[i];
        if (r <= acc) {
          purchased = cat[i];
          break;
        }
      }
    }
    uint64_t query_key = kQueryKeyBase + p;
    (*world.latents)[query_key] = zq;
    rows.push_back({query_key, purchased->key});
  }
  return rows;
}

struct CtrDataset {
  std::vector<BehaviorSample> samples;
  std::vector<double> true_click_prob;  // generator's own probabilities
};

// Known-ground-truth click model:
//   P(click) = sigmoid(w_c * cos(u + z_q, z_t) + w_p * popularity + noise)
inline CtrDataset generate_ctr_dataset(World& world) {
  const WorldConfig& cfg = world.cfg;
  Rng rng(hash_combine(cfg.seed, 0xc7dd47aULL));

  // per-user sampling CDF over items by content affinity, built lazily
  std::vector<std::vector<double>> user_cdf(cfg.n_users);
  auto cdf_of = [&](std::size_t u) -> const std::vector<double>& {
    auto& cdf = user_cdf[u];
    if (cdf.empty()) {
      cdf.resize(world.items.size());
      double acc = 0;
      for (std::size_t i = 0; i < world.items.size(); ++i) {
        acc += std::exp(2.0 * cosine(world.user_interest[u], world.items[i].z));
        cdf[i] = acc;
      }
    }
    return cdf;
  };
  auto sample_item = [&](std::size_t u) -> const LatentItem& {
    const auto& cdf = cdf_of(u);
    double r = rng.uniform() * cdf.back();
    std::size_t lo = std::size_t(std::lower_bound(cdf.begin(), cdf.end(), r) - cdf.begin());
    return world.items[std::min(lo, world.items.size() - 1)];
  };

  CtrDataset out;
  for (std::size_t s = 0; s < cfg.n_ctr_samples; ++s) {
    std::size_t u = rng.index(cfg.n_users);
    BehaviorSample sample;
    sample.user_key = kUserKeyBase + u;

    std::size_t l = 4 + rng.index(cfg.max_behaviors - 3);
    for (std::size_t i = 0; i < l; ++i)
      sample.behavior_keys.push_back(sample_item(u).key);

    // query intent near the user interest
    Tensor zq = world.user_interest[u];
    Tensor jitter = rng.gaussian_tensor({cfg.latent_dim}, cfg.query_noise);
    for (std::size_t d = 0; d < zq.size(); ++d) zq[d] += jitter[d];
    zq = normalized(std::move(zq));
    uint64_t query_key = kQueryKeyBase + (1ULL << 32) + s;
    (*world.latents)[query_key] = zq;
    sample.query_key = query_key;

    // half affinity-drawn, half uniform targets for label balance
    const LatentItem& target =
        (rng.uniform() < 0.5) ? sample_item(u) : world.items[rng.index(world.items.size())];
    sample.target_key = target.key;

    Tensor intent = world.user_interest[u];
    for (std::size_t d = 0; d < intent.size(); ++d) intent[d] += zq[d];
    double logit = cfg.content_weight * cosine(intent, target.z) +
                   cfg.popularity_weight * target.popularity +
                   cfg.noise_scale * rng.gaussian();
    double p = Tape::sigmoid_value(logit);
    sample.label = rng.uniform() < p ? 1 : 0;
    out.samples.push_back(std::move(sample));
    out.true_click_prob.push_back(p);
  }
  return out;
}

// Buckets S1..Sn by descending birth_time (S1 newest). Sizes differ by
// at most one; ordering across buckets is monotone.
inline std::vector<std::vector<uint64_t>> split_cold_start(const std::vector<LatentItem>& items,
                                                           std::size_t n_buckets = 10) {
  std::vector<const LatentItem*> sorted;
  for (const auto& it : items) sorted.push_back(&it);
  std::sort(sorted.begin(), sorted.end(), [](const LatentItem* a, const LatentItem* b) {
    if (a->birth_time != b->birth_time) return a->birth_time > b->birth_time;
    return a->key < b->key;
  });
  std::vector<std::vector<uint64_t>> buckets(std::min(n_buckets, sorted.size()));
  for (std::size_t i = 0; i < sorted.size(); ++i)
    buckets[i * buckets.size() / sorted.size()].push_back(sorted[i]->key);
  return buckets;
}

// Training filter: samples whose target is in the protected set are
// removed from the training side (they stay eligible for evaluation).
inline std::vector<BehaviorSample> filter_training_targets(
    const std::vector<BehaviorSample>& samples, const std::vector<uint64_t>& protected_keys) {
  std::unordered_set<uint64_t> blocked(protected_keys.begin(), protected_keys.end());
  std::vector<BehaviorSample> out;
  for (const auto& s : samples)
    if (!blocked.count(s.target_key)) out.push_back(s);
  return out;
}

}  // namespace mim
