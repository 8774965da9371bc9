#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <unordered_set>

#include "mim/metrics.hpp"
#include "mim/synthdata.hpp"

using namespace mim;

namespace {

WorldConfig small_config(uint64_t seed = 1) {
  WorldConfig cfg;
  cfg.n_items = 200;
  cfg.n_users = 40;
  cfg.n_categories = 8;
  cfg.n_ctr_samples = 2000;
  cfg.n_purchases = 500;
  cfg.seed = seed;
  return cfg;
}

double mean_pairwise_cos(const std::vector<LatentItem>& items, std::size_t limit) {
  double sum = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < std::min(limit, items.size()); ++i)
    for (std::size_t j = i + 1; j < std::min(limit, items.size()); ++j) {
      sum += cosine(items[i].z, items[j].z);
      ++count;
    }
  return sum / double(count);
}

}  // namespace

TEST_CASE("generate_catalog is deterministic and validates its config") {
  WorldConfig cfg = small_config();
  World a = generate_catalog(cfg);
  World b = generate_catalog(cfg);
  REQUIRE(a.items.size() == b.items.size());
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    CHECK(a.items[i].key == b.items[i].key);
    CHECK(a.items[i].category == b.items[i].category);
    CHECK(a.items[i].birth_time == b.items[i].birth_time);
    CHECK(a.items[i].popularity == b.items[i].popularity);
    for (std::size_t d = 0; d < a.items[i].z.size(); ++d)
      CHECK(a.items[i].z[d] == b.items[i].z[d]);
    CHECK(std::abs(a.items[i].z.norm() - 1.0) < 1e-12);
  }
  // providers give identical features too
  for (uint64_t key : {1, 5, 100}) {
    Tensor fa = a.img_provider.provide(key), fb = b.img_provider.provide(key);
    for (std::size_t d = 0; d < fa.size(); ++d) CHECK(fa[d] == fb[d]);
  }

  WorldConfig bad = cfg;
  bad.n_items = 0;
  CHECK_THROWS_AS(generate_catalog(bad), std::invalid_argument);
  bad = cfg;
  bad.content_weight = -1;
  CHECK_THROWS_AS(generate_catalog(bad), std::invalid_argument);
}

TEST_CASE("single category is more cohesive than many categories") {
  WorldConfig one = small_config(3);
  one.n_categories = 1;
  WorldConfig many = small_config(3);
  many.n_categories = 8;
  double c1 = mean_pairwise_cos(generate_catalog(one).items, 80);
  double cm = mean_pairwise_cos(generate_catalog(many).items, 80);
  INFO("single-category mean cos " << c1 << " vs multi " << cm);
  CHECK(c1 > cm);
}

TEST_CASE("noise-free image features are an exact linear view of z") {
  WorldConfig cfg = small_config(5);
  cfg.feature_noise = 0.0;
  World w = generate_catalog(cfg);
  // with noise 0, feature(key) = P z(key); verify linearity by checking
  // the feature of each item equals the same fixed map applied to its z.
  // Recover P's action column by column via items with known z: instead
  // compare features of two items against the same map applied to a
  // third combination is overkill — the cheap exact check is that
  // re-wiring a fresh provider with the same seed reproduces features.
  StubFeatureProvider probe(Modality::Image, 32, cfg.seed);
  probe.wire_latents(w.latents, cfg.latent_dim, 0.0);
  for (const auto& it : w.items) {
    Tensor f = w.img_provider.provide(it.key);
    Tensor g = probe.provide(it.key);
    for (std::size_t d = 0; d < f.size(); ++d) CHECK(f[d] == g[d]);
  }
  // and image vs text are different projections of the same z
  Tensor fi = w.img_provider.provide(1), ft = w.txt_provider.provide(1);
  bool differs = false;
  for (std::size_t d = 0; d < fi.size(); ++d) differs |= (fi[d] != ft[d]);
  CHECK(differs);
}

TEST_CASE("purchase log: argmax limit, determinism, and affinity") {
  WorldConfig cfg = small_config(7);
  cfg.content_weight = INFINITY;
  World w = generate_catalog(cfg);
  auto rows = generate_purchase_log(w);
  REQUIRE(!rows.empty());
  // in the w_c -> infinity limit the purchase is the max-cos item of its category
  for (std::size_t i = 0; i < std::min<std::size_t>(rows.size(), 100); ++i) {
    const auto& row = rows[i];
    const Tensor& zq = w.latents->at(row.query_key);
    uint32_t cat = w.item_by_key(row.item_key).category;
    double best = -2;
    uint64_t best_key = 0;
    for (const auto& it : w.items) {
      if (it.category != cat) continue;
      double c = cosine(zq, it.z);
      if (c > best) {
        best = c;
        best_key = it.key;
      }
    }
    CHECK(row.item_key == best_key);
  }

  // determinism at finite weights
  WorldConfig f = small_config(7);
  World w1 = generate_catalog(f), w2 = generate_catalog(f);
  auto r1 = generate_purchase_log(w1), r2 = generate_purchase_log(w2);
  REQUIRE(r1.size() == r2.size());
  for (std::size_t i = 0; i < r1.size(); ++i) {
    CHECK(r1[i].query_key == r2[i].query_key);
    CHECK(r1[i].item_key == r2[i].item_key);
  }

  // purchased items sit closer to the query latent than random items
  Rng rng(2);
  double pos = 0, rnd = 0;
  for (const auto& row : r1) {
    const Tensor& zq = w1.latents->at(row.query_key);
    pos += cosine(zq, w1.item_by_key(row.item_key).z);
    rnd += cosine(zq, w1.items[rng.index(w1.items.size())].z);
  }
  INFO("mean cos purchased " << pos / double(r1.size()) << " vs random " << rnd / double(r1.size()));
  CHECK(pos > rnd);
}

TEST_CASE("ctr labels are balanced when all weights vanish") {
  WorldConfig cfg = small_config(9);
  cfg.n_ctr_samples = 10000;
  cfg.content_weight = 0;
  cfg.popularity_weight = 0;
  cfg.noise_scale = 0;
  World w = generate_catalog(cfg);
  CtrDataset data = generate_ctr_dataset(w);
  REQUIRE(data.samples.size() == cfg.n_ctr_samples);
  double rate = 0;
  for (const auto& s : data.samples) rate += s.label;
  rate /= double(data.samples.size());
  for (double p : data.true_click_prob) CHECK(p == 0.5);
  CHECK(rate >= 0.45);
  CHECK(rate <= 0.55);
}

TEST_CASE("ctr dataset is deterministic and well-formed") {
  WorldConfig cfg = small_config(11);
  World w1 = generate_catalog(cfg), w2 = generate_catalog(cfg);
  CtrDataset a = generate_ctr_dataset(w1), b = generate_ctr_dataset(w2);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].user_key == b.samples[i].user_key);
    CHECK(a.samples[i].query_key == b.samples[i].query_key);
    CHECK(a.samples[i].target_key == b.samples[i].target_key);
    CHECK(a.samples[i].behavior_keys == b.samples[i].behavior_keys);
    CHECK(a.samples[i].label == b.samples[i].label);
    CHECK(a.true_click_prob[i] == b.true_click_prob[i]);
    CHECK(a.samples[i].behavior_keys.size() <= cfg.max_behaviors);
    CHECK(a.samples[i].user_key >= kUserKeyBase);
    CHECK(a.samples[i].query_key >= kQueryKeyBase);
    CHECK((a.samples[i].label == 0 || a.samples[i].label == 1));
  }
}

TEST_CASE("the generator's own probabilities score AUC > 0.7 at default weights") {
  WorldConfig cfg = small_config(13);
  cfg.n_ctr_samples = 10000;
  World w = generate_catalog(cfg);
  CtrDataset data = generate_ctr_dataset(w);
  std::vector<int> labels;
  for (const auto& s : data.samples) labels.push_back(s.label);
  double oracle = auc(data.true_click_prob, labels);
  INFO("oracle AUC " << oracle);
  CHECK(oracle > 0.7);
}

TEST_CASE("cold-start buckets are balanced and ordered by recency") {
  WorldConfig cfg = small_config(15);
  World w = generate_catalog(cfg);
  auto buckets = split_cold_start(w.items, 10);
  REQUIRE(buckets.size() == 10);
  std::size_t total = 0;
  std::size_t mn = SIZE_MAX, mx = 0;
  for (const auto& b : buckets) {
    total += b.size();
    mn = std::min(mn, b.size());
    mx = std::max(mx, b.size());
  }
  CHECK(total == w.items.size());
  CHECK(mx - mn <= 1);

  // every key in an earlier bucket is at least as new as any in a later one
  auto birth = [&](uint64_t key) { return w.item_by_key(key).birth_time; };
  for (std::size_t b = 0; b + 1 < buckets.size(); ++b) {
    uint64_t oldest_here = UINT64_MAX;
    for (uint64_t k : buckets[b]) oldest_here = std::min(oldest_here, birth(k));
    for (uint64_t k : buckets[b + 1]) CHECK(birth(k) <= oldest_here);
  }

  // ten items -> one per bucket
  std::vector<LatentItem> ten(w.items.begin(), w.items.begin() + 10);
  auto tiny = split_cold_start(ten, 10);
  REQUIRE(tiny.size() == 10);
  for (const auto& b : tiny) CHECK(b.size() == 1);
}

TEST_CASE("training filter removes every sample targeting protected items") {
  WorldConfig cfg = small_config(17);
  World w = generate_catalog(cfg);
  CtrDataset data = generate_ctr_dataset(w);
  auto buckets = split_cold_start(w.items, 10);
  auto filtered = filter_training_targets(data.samples, buckets[0]);
  std::unordered_set<uint64_t> s1(buckets[0].begin(), buckets[0].end());
  CHECK(filtered.size() < data.samples.size());  // something was protected
  for (const auto& s : filtered) CHECK(!s1.count(s.target_key));
}
