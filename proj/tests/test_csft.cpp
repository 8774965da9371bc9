#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "mim/csft.hpp"
#include "mim/rng.hpp"
#include "mim/synthdata.hpp"

using namespace mim;

namespace {

MMEmbeddingBundle random_bundle(Rng& rng, uint64_t key, std::size_t d = 4) {
  return {rng.uniform_tensor({d}, -1, 1), rng.uniform_tensor({d}, -1, 1),
          rng.uniform_tensor({d}, -1, 1), key};
}

}  // namespace

TEST_CASE("build_triplets basics") {
  CatalogIndex catalog;
  catalog.add(1, 0);  // A
  catalog.add(2, 0);  // B
  catalog.add(3, 1);  // lone category

  auto r = build_triplets({{100, 1}}, catalog, 7);
  REQUIRE(r.triplets.size() == 1);
  CHECK(r.triplets[0].query_key == 100);
  CHECK(r.triplets[0].pos_item_key == 1);
  CHECK(r.triplets[0].hard_neg_key == 2);  // only choice

  auto skipped = build_triplets({{100, 3}}, catalog, 7);
  CHECK(skipped.triplets.empty());
  CHECK(skipped.skipped_no_alternative == 1);

  auto rejected = build_triplets({{100, 999}}, catalog, 7);
  CHECK(rejected.triplets.empty());
  REQUIRE(rejected.rejected.size() == 1);
  CHECK(rejected.rejected[0].second == "unknown item key");
}

TEST_CASE("hard negatives are uniform over category alternatives") {
  CatalogIndex catalog;
  catalog.add(1, 0);
  catalog.add(2, 0);
  catalog.add(3, 0);
  std::vector<PurchaseRow> purchases(1000, {50, 1});
  auto r = build_triplets(purchases, catalog, 123);
  REQUIRE(r.triplets.size() == 1000);
  std::map<uint64_t, int> counts;
  for (const auto& t : r.triplets) counts[t.hard_neg_key]++;
  CHECK(counts.size() == 2);
  CHECK(std::abs(counts[2] - 500) <= 50);  // within +-5%
  CHECK(std::abs(counts[3] - 500) <= 50);
}

TEST_CASE("pool_gather count law over the full grid") {
  Rng rng(3);
  for (std::size_t N : {1u, 2u, 4u, 8u}) {
    for (std::size_t k : {0u, 1u, 3u}) {
      for (std::size_t P : {1u, 2u, 4u}) {
        NegativePool pool({N, k, P, 1.0});
        for (std::size_t j = 0; j <= 5; ++j) {
          for (std::size_t w = 0; w < P; ++w) {
            NegativePool::Batch batch;
            for (std::size_t i = 0; i < N; ++i)
              batch.push_back({random_bundle(rng, j * 1000 + i), random_bundle(rng, j * 1000 + 500 + i)});
            pool.push_batch(w, std::move(batch));
          }
          std::size_t expect = 2 * N * P * (std::min(j, k) + 1) - 1;
          CHECK(pool.gather(0, 0).size() == expect);
          CHECK(pool.gather(P - 1, N - 1).size() == expect);
        }
      }
    }
  }
}

TEST_CASE("reference pool counts") {
  // N=1024, k=10, P=1 warmed -> 2N(k+1)-1 = 22527
  NegSamplingConfig big{1024, 10, 1, 1.0};
  NegativePool pool(big);
  Rng rng(5);
  MMEmbeddingBundle proto = random_bundle(rng, 0, 2);
  for (std::size_t j = 0; j <= big.k; ++j) {
    NegativePool::Batch batch(big.N, {proto, proto});
    pool.push_batch(0, std::move(batch));
  }
  CHECK(pool.gather(0, 0).size() == 22527);

  // N=2, k=1, P=3 warmed -> 23; at first batch -> 2NP-1
  NegativePool small({2, 1, 3, 1.0});
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t w = 0; w < 3; ++w) {
      NegativePool::Batch batch(2, {proto, proto});
      small.push_batch(w, std::move(batch));
    }
  CHECK(small.gather(0, 0).size() == 23);

  NegativePool first({2, 1, 1, 1.0});
  NegativePool::Batch batch(2, {proto, proto});
  first.push_batch(0, std::move(batch));
  CHECK(first.gather(0, 0).size() == 3);

  CHECK_THROWS_AS(first.gather(0, 5), std::out_of_range);
}

TEST_CASE("worker sharding gathers the same multiset as one wide worker") {
  Rng rng(9);
  std::vector<NegativePool::Entry> global;
  for (int i = 0; i < 4; ++i) global.push_back({random_bundle(rng, uint64_t(i)), random_bundle(rng, uint64_t(100 + i))});

  NegativePool sharded({2, 0, 2, 1.0});
  sharded.push_batch(0, {global[0], global[1]});
  sharded.push_batch(1, {global[2], global[3]});

  NegativePool wide({4, 0, 1, 1.0});
  wide.push_batch(0, global);

  auto keys_of = [](const std::vector<NegativePool::Gathered>& g) {
    std::multiset<uint64_t> s;
    for (const auto& e : g) s.insert(e.bundle->item_key);
    return s;
  };
  CHECK(keys_of(sharded.gather(0, 0)) == keys_of(wide.gather(0, 0)));
  CHECK(keys_of(sharded.gather(1, 1)) == keys_of(wide.gather(0, 3)));
}

TEST_CASE("infonce closed forms") {
  // uniform logits, K=3 negatives -> ln 4 regardless of tau
  Tensor a{1, 0};
  std::vector<Tensor> negs{Tensor{0.5, 0.5}, Tensor{0.5, 0.5}, Tensor{0.5, 0.5}};
  double l = infonce_value(a, Tensor{0.5, 0.5}, negs, 0.37);
  CHECK(l == doctest::Approx(std::log(4.0)).epsilon(1e-9));

  // K=1, cos+=1, cos-=0, tau=1 -> ln(1+e^-1)
  double l2 = infonce_value(Tensor{1, 0}, Tensor{2, 0}, {Tensor{0, 1}}, 1.0);
  CHECK(l2 == doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-9));
}

TEST_CASE("infonce errors identify the zero-norm argument") {
  Tape tape;
  Var a = tape.input(Tensor{1.0, 0.0});
  Var p = tape.input(Tensor{0.0, 0.0});
  try {
    infonce(tape, a, p, {}, 1.0);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("positive") != std::string::npos);
  }
  CHECK_THROWS_AS(infonce(tape, a, a, {}, -1.0), std::invalid_argument);
}

TEST_CASE("infonce loss properties") {
  Rng rng(31);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor a = rng.uniform_tensor({4}, -1, 1);
    Tensor p = rng.uniform_tensor({4}, -1, 1);
    std::vector<Tensor> negs;
    for (std::size_t i = 0; i < 1 + rng.index(5); ++i)
      negs.push_back(rng.uniform_tensor({4}, -1, 1));
    CHECK(infonce_value(a, p, negs, 0.5) >= 0.0);
  }

  // uniform-logit loss grows from ln(K+1) to ln(K'+1)
  Tensor a{1, 0};
  Tensor u{0.5, 0.5};
  for (std::size_t K : {1u, 3u, 7u, 16u}) {
    std::vector<Tensor> negs(K, u);
    CHECK(infonce_value(a, u, negs, 1.0) == doctest::Approx(std::log(double(K + 1))).epsilon(1e-9));
  }
}

TEST_CASE("infonce gradient matches finite differences on a 4-item batch") {
  Rng rng(77);
  Tensor a = rng.uniform_tensor({4}, -1, 1);
  Tensor p = rng.uniform_tensor({4}, -1, 1);
  std::vector<Tensor> negs{rng.uniform_tensor({4}, -1, 1), rng.uniform_tensor({4}, -1, 1),
                           rng.uniform_tensor({4}, -1, 1)};

  Tape tape;
  Var av = tape.input(a), pv = tape.input(p);
  std::vector<Var> nv;
  for (const auto& n : negs) nv.push_back(tape.input(n));
  tape.backward_scalar(infonce(tape, av, pv, nv, 0.8));

  std::vector<Tensor> inputs{a, p};
  for (const auto& n : negs) inputs.push_back(n);
  auto fd = finite_diff(
      [&](const std::vector<Tensor>& xs) {
        std::vector<Tensor> ns(xs.begin() + 2, xs.end());
        return infonce_value(xs[0], xs[1], ns, 0.8);
      },
      inputs);
  CHECK(max_rel_error(tape.gradient(av), fd[0]) < 1e-4);
  CHECK(max_rel_error(tape.gradient(pv), fd[1]) < 1e-4);
  for (std::size_t i = 0; i < negs.size(); ++i)
    CHECK(max_rel_error(tape.gradient(nv[i]), fd[2 + i]) < 1e-4);
}

TEST_CASE("detached pool entries change the loss but receive zero gradient") {
  Rng rng(12);
  Tensor a = rng.uniform_tensor({4}, -1, 1);
  Tensor p = rng.uniform_tensor({4}, -1, 1);
  Tensor stale = rng.uniform_tensor({4}, -1, 1);

  auto loss_with = [&](const Tensor& s) {
    Tape tape;
    Var av = tape.input(a), pv = tape.input(p);
    Var sv = tape.input(s, false);  // detached
    Var l = infonce(tape, av, pv, {sv}, 1.0);
    tape.backward_scalar(l);
    Tensor g = tape.gradient(sv);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0);
    return tape.value(l)[0];
  };
  double l1 = loss_with(stale);
  Tensor perturbed = stale;
  perturbed[0] += 0.5;
  CHECK(loss_with(perturbed) != l1);
}

TEST_CASE("csft_loss reduces and recomposes") {
  EncoderDims dims;
  dims.d_img = dims.d_txt = 6;
  dims.d_a = 4;
  dims.d_mm = 4;
  dims.mlp_hidden = {8};
  EncoderHead head(dims, 5);
  StubFeatureProvider img(Modality::Image, 6, 2), txt(Modality::Text, 6, 2);

  NegSamplingConfig cfg{2, 0, 1, 1.0};
  std::vector<InterestTriplet> trip{{1000, 1, 2}, {1001, 3, 4}};

  auto build = [&](const CsftLossWeights& w) {
    NegativePool pool(cfg);
    NegativePool::Batch warm;
    for (const auto& t : trip)
      warm.push_back({head.encode_item(t.pos_item_key, img, txt),
                      head.encode_item(t.hard_neg_key, img, txt)});
    pool.push_batch(0, warm);

    Tape tape;
    auto hv = head.register_on(tape, true);
    CsftBatchVars batch;
    for (const auto& t : trip) {
      batch.query.push_back(EncoderHead::project_image(tape, hv, tape.constant(img.provide(t.query_key))));
      batch.pos.push_back(EncoderHead::encode_item_vars(
          tape, hv, tape.constant(img.provide(t.pos_item_key)), tape.constant(txt.provide(t.pos_item_key))));
      batch.neg.push_back(EncoderHead::encode_item_vars(
          tape, hv, tape.constant(img.provide(t.hard_neg_key)), tape.constant(txt.provide(t.hard_neg_key))));
    }
    Var l = csft_loss(tape, batch, pool, 0, w, cfg);
    return tape.value(l)[0];
  };

  double item_only = build({0.0, 0.0});
  double full = build({0.5, 0.5});

  // recompose from three separate infonce sums
  NegativePool pool(cfg);
  NegativePool::Batch warm;
  for (const auto& t : trip)
    warm.push_back({head.encode_item(t.pos_item_key, img, txt),
                    head.encode_item(t.hard_neg_key, img, txt)});
  pool.push_batch(0, warm);

  double sum_item = 0, sum_txt = 0, sum_img = 0;
  for (std::size_t a = 0; a < trip.size(); ++a) {
    Tensor q = head.encode_query(img.provide(trip[a].query_key));
    MMEmbeddingBundle pos = head.encode_item(trip[a].pos_item_key, img, txt);
    std::vector<Tensor> n_mm, n_txt, n_img;
    for (const auto& g : pool.gather(0, a)) {
      n_mm.push_back(g.bundle->h_mm);
      n_txt.push_back(g.bundle->h_txt);
      n_img.push_back(g.bundle->h_img);
    }
    sum_item += infonce_value(q, pos.h_mm, n_mm, cfg.tau);
    sum_txt += infonce_value(q, pos.h_txt, n_txt, cfg.tau);
    sum_img += infonce_value(q, pos.h_img, n_img, cfg.tau);
  }
  double n = double(trip.size());
  CHECK(item_only == doctest::Approx(sum_item / n).epsilon(1e-10));
  CHECK(full == doctest::Approx((sum_item + 0.5 * sum_txt + 0.5 * sum_img) / n).epsilon(1e-10));
}

TEST_CASE("train_csft bookkeeping and determinism") {
  EncoderDims dims;
  dims.d_img = dims.d_txt = 8;
  dims.d_a = 4;
  dims.d_mm = 4;
  dims.mlp_hidden = {8};
  StubFeatureProvider img(Modality::Image, 8, 2), txt(Modality::Text, 8, 2);
  std::vector<InterestTriplet> one{{1000, 1, 2}};

  CsftTrainConfig cfg;
  cfg.sampling = {1, 1, 1, 1.0};
  cfg.epochs = 10;
  cfg.lr = 0.01;

  EncoderHead h1(dims, 3);
  auto r1 = train_csft(one, h1, img, txt, img, cfg);
  CHECK(r1.loss_trajectory.size() == 10);

  EncoderHead h2(dims, 3);
  auto r2 = train_csft(one, h2, img, txt, img, cfg);
  for (std::size_t i = 0; i < r1.loss_trajectory.size(); ++i)
    CHECK(r1.loss_trajectory[i] == r2.loss_trajectory[i]);

  CHECK_THROWS_AS(train_csft({}, h1, img, txt, img, cfg), std::invalid_argument);
}

TEST_CASE("csft aligns queries with purchased items on a latent world") {
  WorldConfig wc;
  wc.n_items = 60;
  wc.n_categories = 6;
  wc.n_users = 10;
  wc.n_purchases = 300;
  wc.seed = 11;
  World world = generate_catalog(wc);
  auto purchases = generate_purchase_log(world);
  auto built = build_triplets(purchases, world.catalog_index(), wc.seed);
  REQUIRE(built.triplets.size() > 100);

  EncoderDims dims;  // defaults: 32/32 -> 16 -> 16
  EncoderHead head(dims, 3);

  CsftTrainConfig cfg;
  cfg.sampling = {8, 3, 2, 0.2};
  cfg.epochs = 4;
  cfg.lr = 0.005;
  cfg.adam = true;
  cfg.seed = 5;
  train_csft(built.triplets, head, world.img_provider, world.txt_provider,
             world.img_provider, cfg);

  Rng rng(19);
  double pos_cos = 0, rand_cos = 0;
  std::size_t n = 200;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = built.triplets[i % built.triplets.size()];
    Tensor q = head.encode_query(world.img_provider.provide(t.query_key));
    Tensor pos = head.encode_item(t.pos_item_key, world.img_provider, world.txt_provider).h_mm;
    uint64_t random_key = world.items[rng.index(world.items.size())].key;
    Tensor other = head.encode_item(random_key, world.img_provider, world.txt_provider).h_mm;
    pos_cos += cosine(q, pos);
    rand_cos += cosine(q, other);
  }
  pos_cos /= double(n);
  rand_cos /= double(n);
  INFO("mean cos(query,pos)=" << pos_cos << " vs random=" << rand_cos);
  CHECK(pos_cos - rand_cos >= 0.1);
}

TEST_CASE("triplet file and checkpoint round-trips") {
  std::vector<InterestTriplet> trips{{1, 2, 3}, {4, 5, 6}, {uint64_t(1) << 45, 7, 8}};
  std::string tpath = "triplets_test.tsv";
  write_triplets(tpath, trips);
  auto back = read_triplets(tpath);
  REQUIRE(back.size() == trips.size());
  for (std::size_t i = 0; i < trips.size(); ++i) {
    CHECK(back[i].query_key == trips[i].query_key);
    CHECK(back[i].pos_item_key == trips[i].pos_item_key);
    CHECK(back[i].hard_neg_key == trips[i].hard_neg_key);
  }
  std::remove(tpath.c_str());

  EncoderHead head({}, 77);
  std::string cpath = "head_test.ckpt";
  Checkpoint::save(cpath, head);
  EncoderHead loaded = Checkpoint::load(cpath);
  auto a = head.parameters();
  auto b = loaded.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i]->size(); ++j)
      CHECK((*a[i])[j] == (*b[i])[j]);
  std::remove(cpath.c_str());
}
