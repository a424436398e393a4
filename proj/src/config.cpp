#include "flowcast/config.hpp"

#include "json.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace flowcast::config {

namespace {

using nlohmann::json;

/// Overrides fields of a struct from a JSON object, rejecting unknown keys.
/// Handlers map key -> setter.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj.is_object())
      throw std::invalid_argument("config: " + path_ + " must be a JSON object");
  }

  template <typename T>
  void field(const char* key, T& target) {
    handled_.push_back(key);
    const auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      target = it->get<T>();
    } catch (const json::exception&) {
      throw std::invalid_argument("config: bad value type at " + path_ + "." + key);
    }
  }

  /// Nested section, dispatched to a callable(const json&, path).
  template <typename Fn>
  void section(const char* key, Fn&& fn) {
    handled_.push_back(key);
    const auto it = obj_.find(key);
    if (it == obj_.end()) return;
    fn(*it, path_ + "." + key);
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      bool known = false;
      for (const char* k : handled_)
        if (it.key() == k) known = true;
      if (!known)
        throw std::invalid_argument("config: unknown key " + path_ + "." + it.key());
    }
  }

 private:
  const json& obj_;
  std::string path_;
  std::vector<const char*> handled_;
};

void read_generator(scenario::GeneratorConfig& g, const json& obj, const std::string& path) {
  ObjectReader r(obj, path);
  r.field("agents_min", g.agents_min);
  r.field("agents_max", g.agents_max);
  r.field("duration_min", g.duration_min);
  r.field("duration_max", g.duration_max);
  r.field("layout", g.layout);
  r.field("static_fraction", g.static_fraction);
  r.field("late_birth_fraction", g.late_birth_fraction);
  r.field("speed_min", g.speed_min);
  r.field("speed_max", g.speed_max);
  r.field("speed_noise", g.speed_noise);
  r.field("speed_wave_amp", g.speed_wave_amp);
  r.field("occlusion_enabled", g.occlusion_enabled);
  r.field("scripted_occlusions_per_agent", g.scripted_occlusions_per_agent);
  r.field("occlusion_min", g.occlusion_min);
  r.field("occlusion_max", g.occlusion_max);
  r.field("occlude_turns", g.occlude_turns);
  r.field("blocker_radius", g.blocker_radius);
  r.field("roi_halfwidth", g.roi_halfwidth);
  r.field("perception_range", g.perception_range);
  r.field("static_jitter", g.static_jitter);
  r.finish();
}

json generator_json(const scenario::GeneratorConfig& g) {
  json j;
  j["agents_min"] = g.agents_min;
  j["agents_max"] = g.agents_max;
  j["duration_min"] = g.duration_min;
  j["duration_max"] = g.duration_max;
  j["layout"] = g.layout;
  j["static_fraction"] = g.static_fraction;
  j["late_birth_fraction"] = g.late_birth_fraction;
  j["speed_min"] = g.speed_min;
  j["speed_max"] = g.speed_max;
  j["speed_noise"] = g.speed_noise;
  j["speed_wave_amp"] = g.speed_wave_amp;
  j["occlusion_enabled"] = g.occlusion_enabled;
  j["scripted_occlusions_per_agent"] = g.scripted_occlusions_per_agent;
  j["occlusion_min"] = g.occlusion_min;
  j["occlusion_max"] = g.occlusion_max;
  j["occlude_turns"] = g.occlude_turns;
  j["blocker_radius"] = g.blocker_radius;
  j["roi_halfwidth"] = g.roi_halfwidth;
  j["perception_range"] = g.perception_range;
  j["static_jitter"] = g.static_jitter;
  return j;
}

}  // namespace

void ForecasterConfig::validate() const {
  if (feature_size < 1 || hidden < 1)
    throw std::invalid_argument("config: forecaster sizes must be >= 1");
}

void DfilterConfig::validate() const {
  if (!(q > 0.0)) throw std::invalid_argument("config: dfilter.q must be > 0");
  if (!(sigma0 > 0.0)) throw std::invalid_argument("config: dfilter.sigma0 must be > 0");
  if (hidden.empty()) throw std::invalid_argument("config: dfilter.hidden must be non-empty");
  for (int h : hidden)
    if (h < 1) throw std::invalid_argument("config: dfilter.hidden entries must be >= 1");
  if (!(output_bias > 0.0)) throw std::invalid_argument("config: dfilter.output_bias must be > 0");
  if (!(fixed_r_variance > 0.0))
    throw std::invalid_argument("config: dfilter.fixed_r_variance must be > 0");
}

void TrainingConfig::validate() const {
  if (!(pretrain_lr > 0.0) || !(finetune_lr > 0.0) || !(stream_lr > 0.0))
    throw std::invalid_argument("config: learning rates must be > 0");
  if (pretrain_epochs < 0 || finetune_epochs < 0 || stream_epochs < 0)
    throw std::invalid_argument("config: epoch counts must be >= 0");
  if (finetune_group < 1) throw std::invalid_argument("config: finetune_group must be >= 1");
  if (stream_window < 1) throw std::invalid_argument("config: stream_window must be >= 1");
  if (weight_decay < 0.0) throw std::invalid_argument("config: weight_decay must be >= 0");
  if (!(huber_delta > 0.0)) throw std::invalid_argument("config: huber_delta must be > 0");
  if (conf_weight < 0.0 || single_weight < 0.0)
    throw std::invalid_argument("config: loss weights must be >= 0");
}

void ExperimentConfig::validate() const {
  if (version != 1) throw std::invalid_argument("config: unsupported version");
  generator.validate();
  horizon.validate();
  metrics.validate();
  dfilter.validate();
  kalman.validate();
  forecaster.validate();
  training.validate();
}

std::string canonical_dump(const ExperimentConfig& c) {
  json j;
  j["version"] = c.version;
  j["generator"] = generator_json(c.generator);
  j["horizon"] = {{"tau_h", c.horizon.tau_h},
                  {"tau_f", c.horizon.tau_f},
                  {"num_modes", c.horizon.num_modes}};
  j["metrics"] = {{"mr_threshold", c.metrics.mr_threshold},
                  {"stacked_fluctuation", c.metrics.stacked_fluctuation}};
  j["dfilter"] = {{"q", c.dfilter.q},
                  {"sigma0", c.dfilter.sigma0},
                  {"hidden", c.dfilter.hidden},
                  {"output_bias", c.dfilter.output_bias},
                  {"fixed_r_variance", c.dfilter.fixed_r_variance}};
  j["kalman"] = {{"process_noise", c.kalman.process_noise},
                 {"observation_noise", c.kalman.observation_noise},
                 {"initial_position_std", c.kalman.initial_position_std},
                 {"initial_velocity_std", c.kalman.initial_velocity_std}};
  j["forecaster"] = {{"feature_size", c.forecaster.feature_size},
                     {"hidden", c.forecaster.hidden}};
  j["training"] = {{"pretrain_lr", c.training.pretrain_lr},
                   {"pretrain_epochs", c.training.pretrain_epochs},
                   {"finetune_lr", c.training.finetune_lr},
                   {"finetune_epochs", c.training.finetune_epochs},
                   {"finetune_group", c.training.finetune_group},
                   {"stream_lr", c.training.stream_lr},
                   {"stream_epochs", c.training.stream_epochs},
                   {"stream_window", c.training.stream_window},
                   {"weight_decay", c.training.weight_decay},
                   {"huber_delta", c.training.huber_delta},
                   {"conf_weight", c.training.conf_weight},
                   {"single_weight", c.training.single_weight}};
  // nlohmann objects iterate in key order, so dump() is canonical.
  return j.dump(2) + "\n";
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::string config_hash(const ExperimentConfig& config) {
  const std::uint64_t h = fnv1a64(canonical_dump(config));
  static const char* hex = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 0; i < 16; ++i) s[15 - i] = hex[(h >> (4 * i)) & 0xf];
  return s;
}

ExperimentConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  ObjectReader r(root, "config");
  r.field("version", c.version);
  r.section("generator",
            [&](const json& obj, const std::string& path) { read_generator(c.generator, obj, path); });
  r.section("horizon", [&](const json& obj, const std::string& path) {
    ObjectReader h(obj, path);
    h.field("tau_h", c.horizon.tau_h);
    h.field("tau_f", c.horizon.tau_f);
    h.field("num_modes", c.horizon.num_modes);
    h.finish();
  });
  r.section("metrics", [&](const json& obj, const std::string& path) {
    ObjectReader m(obj, path);
    m.field("mr_threshold", c.metrics.mr_threshold);
    m.field("stacked_fluctuation", c.metrics.stacked_fluctuation);
    m.finish();
  });
  r.section("dfilter", [&](const json& obj, const std::string& path) {
    ObjectReader d(obj, path);
    d.field("q", c.dfilter.q);
    d.field("sigma0", c.dfilter.sigma0);
    d.field("hidden", c.dfilter.hidden);
    d.field("output_bias", c.dfilter.output_bias);
    d.field("fixed_r_variance", c.dfilter.fixed_r_variance);
    d.finish();
  });
  r.section("kalman", [&](const json& obj, const std::string& path) {
    ObjectReader k(obj, path);
    k.field("process_noise", c.kalman.process_noise);
    k.field("observation_noise", c.kalman.observation_noise);
    k.field("initial_position_std", c.kalman.initial_position_std);
    k.field("initial_velocity_std", c.kalman.initial_velocity_std);
    k.finish();
  });
  r.section("forecaster", [&](const json& obj, const std::string& path) {
    ObjectReader f(obj, path);
    f.field("feature_size", c.forecaster.feature_size);
    f.field("hidden", c.forecaster.hidden);
    f.finish();
  });
  r.section("training", [&](const json& obj, const std::string& path) {
    ObjectReader t(obj, path);
    t.field("pretrain_lr", c.training.pretrain_lr);
    t.field("pretrain_epochs", c.training.pretrain_epochs);
    t.field("finetune_lr", c.training.finetune_lr);
    t.field("finetune_epochs", c.training.finetune_epochs);
    t.field("finetune_group", c.training.finetune_group);
    t.field("stream_lr", c.training.stream_lr);
    t.field("stream_epochs", c.training.stream_epochs);
    t.field("stream_window", c.training.stream_window);
    t.field("weight_decay", c.training.weight_decay);
    t.field("huber_delta", c.training.huber_delta);
    t.field("conf_weight", c.training.conf_weight);
    t.field("single_weight", c.training.single_weight);
    t.finish();
  });
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("config: cannot open: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

void write_config_file(const ExperimentConfig& config, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("config: cannot open for writing: " + path);
  out << canonical_dump(config);
  if (!out) throw std::runtime_error("config: write failed: " + path);
}

}  // namespace flowcast::config
