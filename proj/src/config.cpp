#include "dpad/config.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "dpad/errors.hpp"

namespace dpad {
namespace {

using json = nlohmann::ordered_json;

// Wraps one JSON object: typed reads remove keys, so whatever is left at the
// end is unknown and rejected by name.
class Section {
 public:
  Section(json obj, std::string path) : obj_(std::move(obj)), path_(std::move(path)) {
    if (!obj_.is_object())
      throw ConfigError("config key '" + path_ + "' must be an object");
  }

  bool has(const char* key) const { return obj_.contains(key); }

  Section sub(const char* key) {
    if (!obj_.contains(key)) return Section(json::object(), dotted(key));
    json v = obj_.at(key);
    obj_.erase(key);
    return Section(std::move(v), dotted(key));
  }

  void get(const char* key, int64_t& out) {
    if (json v; take(key, v)) {
      if (!v.is_number_integer())
        throw wrong_type(key, "an integer");
      out = v.get<int64_t>();
    }
  }
  void get(const char* key, uint64_t& out) {
    if (json v; take(key, v)) {
      if (!v.is_number_integer() || (v.is_number_integer() && v.get<int64_t>() < 0))
        throw wrong_type(key, "a nonnegative integer");
      out = v.get<uint64_t>();
    }
  }
  void get(const char* key, int& out) {
    int64_t wide = out;
    get(key, wide);
    out = static_cast<int>(wide);
  }
  void get(const char* key, double& out) {
    if (json v; take(key, v)) {
      if (!v.is_number()) throw wrong_type(key, "a number");
      out = v.get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (json v; take(key, v)) {
      if (!v.is_boolean()) throw wrong_type(key, "a boolean");
      out = v.get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (json v; take(key, v)) {
      if (!v.is_string()) throw wrong_type(key, "a string");
      out = v.get<std::string>();
    }
  }
  void get(const char* key, std::vector<double>& out) {
    if (json v; take(key, v)) {
      if (!v.is_array()) throw wrong_type(key, "an array of numbers");
      out.clear();
      for (const json& e : v) {
        if (!e.is_number()) throw wrong_type(key, "an array of numbers");
        out.push_back(e.get<double>());
      }
    }
  }
  void get(const char* key, std::vector<uint64_t>& out) {
    if (json v; take(key, v)) {
      if (!v.is_array()) throw wrong_type(key, "an array of integers");
      out.clear();
      for (const json& e : v) {
        if (!e.is_number_integer() || e.get<int64_t>() < 0)
          throw wrong_type(key, "an array of nonnegative integers");
        out.push_back(e.get<uint64_t>());
      }
    }
  }
  void get(const char* key, std::vector<std::string>& out) {
    if (json v; take(key, v)) {
      if (!v.is_array()) throw wrong_type(key, "an array of strings");
      out.clear();
      for (const json& e : v) {
        if (!e.is_string()) throw wrong_type(key, "an array of strings");
        out.push_back(e.get<std::string>());
      }
    }
  }

  // Anything not consumed by the schema is an error, never ignored.
  void done() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      throw ConfigError("config key '" + dotted(it.key().c_str()) +
                        "' is not recognized");
  }

 private:
  bool take(const char* key, json& out) {
    if (!obj_.contains(key)) return false;
    out = obj_.at(key);
    obj_.erase(key);
    return true;
  }
  std::string dotted(const char* key) const {
    return path_.empty() ? std::string(key) : path_ + "." + key;
  }
  ConfigError wrong_type(const char* key, const char* want) const {
    return ConfigError("config key '" + dotted(key) + "' must be " + want);
  }

  json obj_;
  std::string path_;
};

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

DType dtype_from_precision(const std::string& p) {
  if (p == "f64") return DType::F64;
  if (p == "f32") return DType::F32;
  throw ConfigError("config key 'model.precision' must be \"f64\" or \"f32\", got \"" +
                    p + "\"");
}

}  // namespace

RunConfig parse_config(const std::string& text, const std::string& origin) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  RunConfig cfg;
  Section top(root, "");

  {
    Section data = top.sub("data");
    data.get("train_csv", cfg.data.train_csv);
    data.get("test_csv", cfg.data.test_csv);
    data.get("test_has_labels", cfg.data.test_has_labels);
    data.get("stride", cfg.data.stride);
    require(cfg.data.stride >= 1, "config key 'data.stride' must be >= 1");
    {
      Section syn = data.sub("synthetic");
      SyntheticConfig& s = cfg.data.synthetic;
      syn.get("channels", s.channels);
      syn.get("length", s.length);
      syn.get("seed", s.seed);
      syn.get("train_fraction", s.spec.train_fraction);
      syn.get("drivers", s.spec.drivers);
      syn.get("anomaly_ratio", s.spec.anomaly_ratio);
      syn.get("anomaly_types", s.spec.anomaly_types);
      syn.get("noise_std", s.spec.noise_std);
      syn.get("min_segment", s.spec.min_segment);
      syn.get("max_segment", s.spec.max_segment);
      syn.done();
      require(s.channels >= 2, "config key 'data.synthetic.channels' must be >= 2");
      require(s.length >= 1, "config key 'data.synthetic.length' must be >= 1");
    }
    data.done();
  }

  {
    Section model = top.sub("model");
    ModelConfig& m = cfg.model;
    model.get("channels", m.n_channels);
    model.get("window", m.window);
    model.get("history", m.history);
    model.get("embed_dim", m.embed_dim);
    model.get("heads", m.heads);
    model.get("head_dim", m.head_dim);
    model.get("priors", m.priors);
    model.get("temperature", m.temperature);
    model.get("diffusion_steps", m.diffusion_steps);
    model.get("bidirectional_diffusion", m.bidirectional_diffusion);
    model.get("scales", m.scales);
    model.get("decay", m.decay);
    model.get("scale_fusion", m.scale_fusion);
    model.get("key_dim", m.key_dim);
    model.get("value_dim", m.value_dim);
    model.get("leaky_slope", m.leaky_slope);
    model.get("norm_eps", m.norm_eps);
    model.get("literal_norm", m.literal_norm);
    model.get("disable_lsgm", m.disable_lsgm);
    model.get("disable_fusion_attention", m.disable_fusion_attention);
    std::string precision = m.dtype == DType::F32 ? "f32" : "f64";
    model.get("precision", precision);
    m.dtype = dtype_from_precision(precision);
    model.done();
  }

  {
    Section tr = top.sub("train");
    train::TrainConfig& t = cfg.train;
    tr.get("epochs", t.epochs);
    tr.get("batch", t.batch);
    tr.get("micro_batch", t.micro_batch);
    tr.get("lr", t.lr);
    tr.get("lr_decay", t.lr_decay);
    tr.get("plateau_patience", t.plateau_patience);
    tr.get("min_lr", t.min_lr);
    tr.get("early_stop_patience", t.early_stop_patience);
    tr.get("weight_decay", t.weight_decay);
    tr.get("grad_clip", t.grad_clip);
    tr.get("val_fraction", t.val_fraction);
    std::string kl = train::to_string(t.kl_form);
    tr.get("kl_form", kl);
    t.kl_form = train::kl_form_from_string(kl);
    tr.done();
  }

  top.get("seeds", cfg.seeds);
  require(!cfg.seeds.empty(), "config key 'seeds' must list at least one seed");
  top.get("output_dir", cfg.output_dir);
  require(!cfg.output_dir.empty(), "config key 'output_dir' must be nonempty");
  top.done();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), "'" + path + "'");
}

std::string config_text(const RunConfig& cfg) {
  const SyntheticConfig& s = cfg.data.synthetic;
  const ModelConfig& m = cfg.model;
  const train::TrainConfig& t = cfg.train;
  json root = {
      {"data",
       {{"train_csv", cfg.data.train_csv},
        {"test_csv", cfg.data.test_csv},
        {"test_has_labels", cfg.data.test_has_labels},
        {"stride", cfg.data.stride},
        {"synthetic",
         {{"channels", s.channels},
          {"length", s.length},
          {"seed", s.seed},
          {"train_fraction", s.spec.train_fraction},
          {"drivers", s.spec.drivers},
          {"anomaly_ratio", s.spec.anomaly_ratio},
          {"anomaly_types", s.spec.anomaly_types},
          {"noise_std", s.spec.noise_std},
          {"min_segment", s.spec.min_segment},
          {"max_segment", s.spec.max_segment}}}}},
      {"model",
       {{"channels", m.n_channels},
        {"window", m.window},
        {"history", m.history},
        {"embed_dim", m.embed_dim},
        {"heads", m.heads},
        {"head_dim", m.head_dim},
        {"priors", m.priors},
        {"temperature", m.temperature},
        {"diffusion_steps", m.diffusion_steps},
        {"bidirectional_diffusion", m.bidirectional_diffusion},
        {"scales", m.scales},
        {"decay", m.decay},
        {"scale_fusion", m.scale_fusion},
        {"key_dim", m.key_dim},
        {"value_dim", m.value_dim},
        {"leaky_slope", m.leaky_slope},
        {"norm_eps", m.norm_eps},
        {"literal_norm", m.literal_norm},
        {"disable_lsgm", m.disable_lsgm},
        {"disable_fusion_attention", m.disable_fusion_attention},
        {"precision", m.dtype == DType::F32 ? "f32" : "f64"}}},
      {"train",
       {{"epochs", t.epochs},
        {"batch", t.batch},
        {"micro_batch", t.micro_batch},
        {"lr", t.lr},
        {"lr_decay", t.lr_decay},
        {"plateau_patience", t.plateau_patience},
        {"min_lr", t.min_lr},
        {"early_stop_patience", t.early_stop_patience},
        {"weight_decay", t.weight_decay},
        {"grad_clip", t.grad_clip},
        {"val_fraction", t.val_fraction},
        {"kl_form", train::to_string(t.kl_form)}}},
      {"seeds", cfg.seeds},
      {"output_dir", cfg.output_dir},
  };
  return root.dump(2) + "\n";
}

void save_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << config_text(cfg);
  if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace dpad
