#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mim/ciubm.hpp"
#include "mim/csft.hpp"
#include "mim/encoders.hpp"
#include "mim/synthdata.hpp"

namespace mim {

using nlohmann::json;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

// Strict section reader: every key present in the JSON must be consumed.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;  // keep default
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + name_ + "." + key + "' has the wrong type");
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        throw ConfigError("unknown config key '" + name_ + "." + it.key() + "'");
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace detail

struct DmaConfig {
  std::size_t steps = 200;
  std::size_t batch = 32;
  double lr = 0.005;
  double tau = 0.5;
};

struct CsftConfig {
  double alpha = 0.5;
  double beta = 0.5;
  std::size_t N = 8;
  std::size_t k = 3;
  std::size_t P = 2;
  double tau = 0.2;
  double lr = 0.001;
  std::size_t epochs = 2;
  bool adam = true;
  std::string loss_variant = "multi_level";  // multi_level | item_only | literal
  std::string signal = "purchase";           // purchase | click | category
};

struct CiubmConfig {
  std::string variant = "base+mim";
  std::size_t d_id = 16;
  std::size_t d_user = 8;
  std::size_t max_len = 16;
  std::vector<std::size_t> hidden = {64, 32};
  double lr = 0.005;
  std::size_t epochs = 3;
  std::size_t batch = 64;
};

struct RepcenterConfig {
  std::string bind = "127.0.0.1:0";
  std::size_t window_count = 64;
  long window_ms = 100;
};

struct EvalConfig {
  std::size_t cold_start_buckets = 10;
  double holdout_fraction = 0.2;
};

struct PipelineConfig {
  WorldConfig world;
  EncoderDims encoder;
  DmaConfig dma;
  CsftConfig csft;
  CiubmConfig ciubm;
  RepcenterConfig repcenter;
  EvalConfig eval;

  void validate() const {
    world.validate();
    if (csft.loss_variant != "multi_level" && csft.loss_variant != "item_only" &&
        csft.loss_variant != "literal")
      throw ConfigError("csft.loss_variant must be multi_level, item_only, or literal");
    if (csft.signal != "purchase" && csft.signal != "click" && csft.signal != "category")
      throw ConfigError("csft.signal must be purchase, click, or category");
    if (ciubm.variant != "base" && ciubm.variant != "base+mim" &&
        ciubm.variant != "wo_id_interest" && ciubm.variant != "wo_content_interest" &&
        ciubm.variant != "wo_fusion_interest")
      throw ConfigError("ciubm.variant '" + ciubm.variant + "' is not recognized");
    if (eval.holdout_fraction <= 0 || eval.holdout_fraction >= 1)
      throw ConfigError("eval.holdout_fraction must be in (0,1)");
    if (eval.cold_start_buckets < 2)
      throw ConfigError("eval.cold_start_buckets must be >= 2");
    if (encoder.d_mm != encoder.d_a)
      throw ConfigError("encoder.d_mm must equal encoder.d_a (shared contrastive space)");
    if (ciubm.d_id == 0 || encoder.d_a == 0) throw ConfigError("dims must be positive");
  }

  CtrVariant ctr_variant() const {
    if (ciubm.variant == "base") return CtrVariant::base();
    if (ciubm.variant == "base+mim") return CtrVariant::mim();
    if (ciubm.variant == "wo_id_interest") return CtrVariant::no_id();
    if (ciubm.variant == "wo_content_interest") return CtrVariant::no_content();
    return CtrVariant::no_fusion();
  }

  CtrDims ctr_dims() const {
    CtrDims d;
    d.d_id = ciubm.d_id;
    d.d_user = ciubm.d_user;
    d.d_query = encoder.d_a;
    d.d_mm = encoder.d_mm;
    d.max_len = ciubm.max_len;
    d.hidden = ciubm.hidden;
    return d;
  }

  static PipelineConfig from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    static const std::set<std::string> sections{"world",  "encoder",   "csft",
                                               "ciubm",  "repcenter", "eval"};
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!sections.count(it.key()))
        throw ConfigError("unknown config section '" + it.key() + "'");

    PipelineConfig c;
    if (j.contains("world")) {
      detail::Section s(j.at("world"), "world");
      s.read("n_items", c.world.n_items);
      s.read("n_users", c.world.n_users);
      s.read("n_categories", c.world.n_categories);
      s.read("latent_dim", c.world.latent_dim);
      s.read("n_ctr_samples", c.world.n_ctr_samples);
      s.read("n_purchases", c.world.n_purchases);
      s.read("max_behaviors", c.world.max_behaviors);
      s.read("content_weight", c.world.content_weight);
      s.read("popularity_weight", c.world.popularity_weight);
      s.read("noise_scale", c.world.noise_scale);
      s.read("feature_noise", c.world.feature_noise);
      s.read("query_noise", c.world.query_noise);
      s.finish();
    }
    if (j.contains("encoder")) {
      detail::Section s(j.at("encoder"), "encoder");
      s.read("d_img", c.encoder.d_img);
      s.read("d_txt", c.encoder.d_txt);
      s.read("d_a", c.encoder.d_a);
      s.read("d_mm", c.encoder.d_mm);
      s.read("mlp_hidden", c.encoder.mlp_hidden);
      s.read("use_tfn", c.encoder.use_tfn);
      s.read("dma_steps", c.dma.steps);
      s.read("dma_batch", c.dma.batch);
      s.read("dma_lr", c.dma.lr);
      s.read("dma_tau", c.dma.tau);
      s.finish();
    }
    if (j.contains("csft")) {
      detail::Section s(j.at("csft"), "csft");
      s.read("alpha", c.csft.alpha);
      s.read("beta", c.csft.beta);
      s.read("N", c.csft.N);
      s.read("k", c.csft.k);
      s.read("P", c.csft.P);
      s.read("tau", c.csft.tau);
      s.read("lr", c.csft.lr);
      s.read("epochs", c.csft.epochs);
      s.read("adam", c.csft.adam);
      s.read("loss_variant", c.csft.loss_variant);
      s.read("signal", c.csft.signal);
      s.finish();
    }
    if (j.contains("ciubm")) {
      detail::Section s(j.at("ciubm"), "ciubm");
      s.read("variant", c.ciubm.variant);
      s.read("d_id", c.ciubm.d_id);
      s.read("d_user", c.ciubm.d_user);
      s.read("max_len", c.ciubm.max_len);
      s.read("hidden", c.ciubm.hidden);
      s.read("lr", c.ciubm.lr);
      s.read("epochs", c.ciubm.epochs);
      s.read("batch", c.ciubm.batch);
      s.finish();
    }
    if (j.contains("repcenter")) {
      detail::Section s(j.at("repcenter"), "repcenter");
      s.read("bind", c.repcenter.bind);
      s.read("window_count", c.repcenter.window_count);
      s.read("window_ms", c.repcenter.window_ms);
      s.finish();
    }
    if (j.contains("eval")) {
      detail::Section s(j.at("eval"), "eval");
      s.read("cold_start_buckets", c.eval.cold_start_buckets);
      s.read("holdout_fraction", c.eval.holdout_fraction);
      s.finish();
    }
    c.validate();
    return c;
  }

  static PipelineConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    json j;
    try {
      f >> j;
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return from_json(j);
  }

  // Fully-resolved form: every effective value, defaults included.
  json to_json() const {
    json j;
    j["world"] = {{"n_items", world.n_items},
                  {"n_users", world.n_users},
                  {"n_categories", world.n_categories},
                  {"latent_dim", world.latent_dim},
                  {"n_ctr_samples", world.n_ctr_samples},
                  {"n_purchases", world.n_purchases},
                  {"max_behaviors", world.max_behaviors},
                  {"content_weight", world.content_weight},
                  {"popularity_weight", world.popularity_weight},
                  {"noise_scale", world.noise_scale},
                  {"feature_noise", world.feature_noise},
                  {"query_noise", world.query_noise}};
    j["encoder"] = {{"d_img", encoder.d_img},
                    {"d_txt", encoder.d_txt},
                    {"d_a", encoder.d_a},
                    {"d_mm", encoder.d_mm},
                    {"mlp_hidden", encoder.mlp_hidden},
                    {"use_tfn", encoder.use_tfn},
                    {"dma_steps", dma.steps},
                    {"dma_batch", dma.batch},
                    {"dma_lr", dma.lr},
                    {"dma_tau", dma.tau}};
    j["csft"] = {{"alpha", csft.alpha}, {"beta", csft.beta},
                 {"N", csft.N},         {"k", csft.k},
                 {"P", csft.P},         {"tau", csft.tau},
                 {"lr", csft.lr},       {"epochs", csft.epochs},
                 {"adam", csft.adam},   {"loss_variant", csft.loss_variant},
                 {"signal", csft.signal}};
    j["ciubm"] = {{"variant", ciubm.variant}, {"d_id", ciubm.d_id},
                  {"d_user", ciubm.d_user},   {"max_len", ciubm.max_len},
                  {"hidden", ciubm.hidden},   {"lr", ciubm.lr},
                  {"epochs", ciubm.epochs},   {"batch", ciubm.batch}};
    j["repcenter"] = {{"bind", repcenter.bind},
                      {"window_count", repcenter.window_count},
                      {"window_ms", repcenter.window_ms}};
    j["eval"] = {{"cold_start_buckets", eval.cold_start_buckets},
                 {"holdout_fraction", eval.holdout_fraction}};
    return j;
  }
};

// FNV-1a over the canonical (sorted-key) serialization.
inline uint64_t config_hash(const PipelineConfig& cfg) {
  std::string s = cfg.to_json().dump();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash_hex(const PipelineConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(config_hash(cfg)));
  return buf;
}

}  // namespace mim
