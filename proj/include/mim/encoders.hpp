#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "mim/autodiff.hpp"
#include "mim/optim.hpp"
#include "mim/rng.hpp"
#include "mim/tensor.hpp"

namespace mim {

enum class Modality : uint64_t { Image = 0x1337c0ffee001ULL, Text = 0x1337c0ffee002ULL };

// Deterministic stand-in for a pre-trained vision/language encoder.
// Output is a pure function of (modality, dim, seed, key): either raw
// hash expansion, or a fixed seeded linear view of a latent vector
// plus per-key hash noise when a latent table is wired in.
class StubFeatureProvider {
 public:
  StubFeatureProvider(Modality modality, std::size_t dim, uint64_t seed)
      : modality_(modality), dim_(dim), seed_(seed) {}

  // Latent wiring: feature(key) = proj * z(key) + noise_scale * hash_noise(key).
  // proj is generated from (seed, modality) once, so the map is fixed.
  void wire_latents(std::shared_ptr<const std::unordered_map<uint64_t, Tensor>> latents,
                    std::size_t latent_dim, double noise_scale) {
    latents_ = std::move(latents);
    noise_scale_ = noise_scale;
    Rng rng(hash_combine(seed_, uint64_t(modality_) ^ 0xabcdULL));
    proj_ = rng.gaussian_tensor({dim_, latent_dim}, 1.0 / std::sqrt(double(latent_dim)));
  }

  Tensor provide(uint64_t key) const {
    if (latents_) {
      auto it = latents_->find(key);
      if (it != latents_->end()) {
        const Tensor& z = it->second;
        Tensor out = Tensor::zeros({dim_});
        for (std::size_t i = 0; i < dim_; ++i) {
          double s = 0;
          for (std::size_t j = 0; j < z.size(); ++j) s += proj_.at(i, j) * z[j];
          out[i] = s;
        }
        if (noise_scale_ > 0) {
          Tensor n = hash_expand(key ^ 0x5eed0015eULL);
          for (std::size_t i = 0; i < dim_; ++i) out[i] += noise_scale_ * n[i];
        }
        return out;
      }
    }
    return hash_expand(key);
  }

  Modality modality() const { return modality_; }
  std::size_t dim() const { return dim_; }

 private:
  Tensor hash_expand(uint64_t key) const {
    Rng rng(hash_combine(hash_combine(seed_, uint64_t(modality_)), key));
    return rng.uniform_tensor({dim_}, -1.0, 1.0);
  }

  Modality modality_;
  std::size_t dim_;
  uint64_t seed_;
  std::shared_ptr<const std::unordered_map<uint64_t, Tensor>> latents_;
  Tensor proj_;
  double noise_scale_ = 0.0;
};

// Augmented outer product [a;1] (x) [b;1], row-major flatten.
inline Tensor tfn_fuse(const Tensor& a, const Tensor& b) {
  std::size_t d1 = a.size(), d2 = b.size();
  Tensor y = Tensor::zeros({(d1 + 1) * (d2 + 1)});
  for (std::size_t i = 0; i <= d1; ++i) {
    double ai = i < d1 ? a[i] : 1.0;
    for (std::size_t j = 0; j <= d2; ++j)
      y[i * (d2 + 1) + j] = ai * (j < d2 ? b[j] : 1.0);
  }
  return y;
}

struct AffineParams {
  Tensor W;  // [out, in]
  Tensor b;  // [out]

  static AffineParams init(std::size_t out, std::size_t in, Rng& rng) {
    double bound = 1.0 / std::sqrt(double(in));
    return {rng.uniform_tensor({out, in}, -bound, bound),
            rng.uniform_tensor({out}, -bound, bound)};
  }

  static AffineParams zeros(std::size_t out, std::size_t in) {
    return {Tensor::zeros({out, in}), Tensor::zeros({out})};
  }
};

struct MMEmbeddingBundle {
  Tensor h_mm;
  Tensor h_img;
  Tensor h_txt;
  uint64_t item_key = 0;
};

struct EncoderDims {
  std::size_t d_img = 32;
  std::size_t d_txt = 32;
  std::size_t d_a = 16;
  std::size_t d_mm = 16;
  std::vector<std::size_t> mlp_hidden = {64};
  bool use_tfn = true;  // false: plain concat fusion (ablation)

  std::size_t fused_dim() const { return use_tfn ? (d_a + 1) * (d_a + 1) : 2 * d_a; }
};

// DMA projection heads plus the TFN + MLP fusion head. All weights
// trainable; shared across threads only when read-only.
class EncoderHead {
 public:
  EncoderHead() = default;

  EncoderHead(EncoderDims dims, uint64_t seed) : dims_(dims) {
    Rng rng(hash_combine(seed, 0xecde4dULL));
    proj_img_ = AffineParams::init(dims.d_a, dims.d_img, rng);
    proj_txt_ = AffineParams::init(dims.d_a, dims.d_txt, rng);
    std::size_t in = dims.fused_dim();
    for (std::size_t h : dims.mlp_hidden) {
      mlp_.push_back(AffineParams::init(h, in, rng));
      in = h;
    }
    mlp_.push_back(AffineParams::init(dims.d_mm, in, rng));
  }

  static EncoderHead zeros(EncoderDims dims) {
    EncoderHead h;
    h.dims_ = dims;
    h.proj_img_ = AffineParams::zeros(dims.d_a, dims.d_img);
    h.proj_txt_ = AffineParams::zeros(dims.d_a, dims.d_txt);
    std::size_t in = dims.fused_dim();
    for (std::size_t hh : dims.mlp_hidden) {
      h.mlp_.push_back(AffineParams::zeros(hh, in));
      in = hh;
    }
    h.mlp_.push_back(AffineParams::zeros(dims.d_mm, in));
    return h;
  }

  const EncoderDims& dims() const { return dims_; }

  // Parameter pointers in fixed order (projections, then MLP layers).
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> ps{&proj_img_.W, &proj_img_.b, &proj_txt_.W, &proj_txt_.b};
    for (auto& l : mlp_) {
      ps.push_back(&l.W);
      ps.push_back(&l.b);
    }
    return ps;
  }
  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> ps{&proj_img_.W, &proj_img_.b, &proj_txt_.W, &proj_txt_.b};
    for (auto& l : mlp_) {
      ps.push_back(&l.W);
      ps.push_back(&l.b);
    }
    return ps;
  }

  struct TapeVars {
    Var pi_w, pi_b, pt_w, pt_b;
    std::vector<std::pair<Var, Var>> mlp;
    bool use_tfn = true;
  };

  TapeVars register_on(Tape& tape, bool requires_grad) const {
    TapeVars v;
    v.use_tfn = dims_.use_tfn;
    v.pi_w = tape.input(proj_img_.W, requires_grad);
    v.pi_b = tape.input(proj_img_.b, requires_grad);
    v.pt_w = tape.input(proj_txt_.W, requires_grad);
    v.pt_b = tape.input(proj_txt_.b, requires_grad);
    for (auto& l : mlp_)
      v.mlp.push_back({tape.input(l.W, requires_grad), tape.input(l.b, requires_grad)});
    return v;
  }

  // Gradients matching parameters() order.
  static std::vector<Tensor> collect_gradients(const Tape& tape, const TapeVars& v) {
    std::vector<Tensor> gs{tape.gradient(v.pi_w), tape.gradient(v.pi_b),
                           tape.gradient(v.pt_w), tape.gradient(v.pt_b)};
    for (auto& l : v.mlp) {
      gs.push_back(tape.gradient(l.first));
      gs.push_back(tape.gradient(l.second));
    }
    return gs;
  }

  static Var project_image(Tape& tape, const TapeVars& v, Var feat) {
    return tape.affine(v.pi_w, feat, v.pi_b);
  }
  static Var project_text(Tape& tape, const TapeVars& v, Var feat) {
    return tape.affine(v.pt_w, feat, v.pt_b);
  }

  static Var mlp_forward(Tape& tape, const TapeVars& v, Var x) {
    for (std::size_t i = 0; i < v.mlp.size(); ++i) {
      x = tape.affine(v.mlp[i].first, x, v.mlp[i].second);
      if (i + 1 < v.mlp.size()) x = tape.relu(x);
    }
    return x;
  }

  struct BundleVars {
    Var h_mm, h_img, h_txt;
  };

  static BundleVars encode_item_vars(Tape& tape, const TapeVars& v, Var f_img, Var f_txt) {
    BundleVars b;
    b.h_img = project_image(tape, v, f_img);
    b.h_txt = project_text(tape, v, f_txt);
    Var fused = v.use_tfn ? tape.outer_aug(b.h_img, b.h_txt)
                          : tape.concat({b.h_img, b.h_txt});
    b.h_mm = mlp_forward(tape, v, fused);
    return b;
  }

  MMEmbeddingBundle encode_item(uint64_t key, const Tensor& f_img,
                                const Tensor& f_txt) const {
    Tape tape;
    TapeVars v = register_on(tape, false);
    BundleVars b = encode_item_vars(tape, v, tape.constant(f_img), tape.constant(f_txt));
    return {tape.value(b.h_mm), tape.value(b.h_img), tape.value(b.h_txt), key};
  }

  MMEmbeddingBundle encode_item(uint64_t key, const StubFeatureProvider& img,
                                const StubFeatureProvider& txt) const {
    return encode_item(key, img.provide(key), txt.provide(key));
  }

  Tensor encode_query(const Tensor& f_img) const {
    Tape tape;
    TapeVars v = register_on(tape, false);
    Var q = project_image(tape, v, tape.constant(f_img));
    return tape.value(q);
  }

 private:
  friend class Checkpoint;
  EncoderDims dims_;
  AffineParams proj_img_, proj_txt_;
  std::vector<AffineParams> mlp_;
};

struct DmaStepResult {
  double loss = 0.0;
  std::vector<Tensor> gradients;  // proj_img.W, proj_img.b, proj_txt.W, proj_txt.b
};

// Symmetric in-batch InfoNCE over projected (image, text) pairs:
// image->text and text->image cross entropies, averaged.
inline DmaStepResult dma_align_step(const EncoderHead& head,
                                    const std::vector<std::pair<Tensor, Tensor>>& batch,
                                    double tau) {
  if (batch.empty()) throw std::invalid_argument("dma_align_step: empty batch");
  if (tau <= 0) throw std::invalid_argument("dma_align_step: tau must be > 0");
  Tape tape;
  EncoderHead::TapeVars v = head.register_on(tape, true);
  std::size_t n = batch.size();
  std::vector<Var> pi(n), pt(n);
  for (std::size_t i = 0; i < n; ++i) {
    pi[i] = EncoderHead::project_image(tape, v, tape.constant(batch[i].first));
    pt[i] = EncoderHead::project_text(tape, v, tape.constant(batch[i].second));
  }
  std::vector<std::vector<Var>> sim(n, std::vector<Var>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      sim[i][j] = tape.scale(tape.cosine(pi[i], pt[j], "image", "text"), 1.0 / tau);
  std::vector<Var> losses;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Var> row(n), col(n);
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = sim[i][j];
      col[j] = sim[j][i];
    }
    losses.push_back(tape.sub(tape.log_sum_exp(tape.concat(row)), sim[i][i]));
    losses.push_back(tape.sub(tape.log_sum_exp(tape.concat(col)), sim[i][i]));
  }
  Var loss = tape.scale(tape.mean(tape.concat(losses)), 1.0);
  tape.backward_scalar(loss);
  DmaStepResult r;
  r.loss = tape.value(loss)[0];
  r.gradients = {tape.gradient(v.pi_w), tape.gradient(v.pi_b),
                 tape.gradient(v.pt_w), tape.gradient(v.pt_b)};
  return r;
}

// DMA pre-training loop; only the two projection heads are updated.
inline std::vector<double> train_dma(EncoderHead& head,
                                     const std::vector<std::pair<Tensor, Tensor>>& pairs,
                                     std::size_t batch_size, std::size_t steps,
                                     double lr, double tau, uint64_t seed) {
  std::vector<Tensor*> all = head.parameters();
  std::vector<Tensor*> proj(all.begin(), all.begin() + 4);
  Optimizer opt(Optimizer::Kind::Adam, lr);
  opt.attach(proj);
  Rng rng(seed);
  std::vector<double> trajectory;
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<std::pair<Tensor, Tensor>> batch;
    for (std::size_t i = 0; i < batch_size; ++i)
      batch.push_back(pairs[rng.index(pairs.size())]);
    DmaStepResult r = dma_align_step(head, batch, tau);
    opt.step(r.gradients);
    trajectory.push_back(r.loss);
  }
  return trajectory;
}

}  // namespace mim
