#pragma once

// Run configuration for the command-line tool: JSON with nested sections,
// strict key checking, defaults echoed back out.

#include "ddl/trainer.hpp"

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace ddl {

using Json = nlohmann::ordered_json;

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | mnist | cifar10
  std::string path;                // empty: DDL_DATA_DIR
  Index train_limit = 0;           // 0 = all
  Index test_limit = 0;
  // synthetic only
  int classes = 4;
  Index train_per_class = 100;
  Index test_per_class = 50;
  Index side = 12;
  int strokes = 3;
  double noise = 0.05;
  std::uint64_t data_seed = 1;
};

struct LayerConfig {
  Index atoms = 1;
  Index window = 1;
  Index stride = 1;
};

struct ModelConfig {
  WindowSpec input_window{1, 1};
  /// Explicit layer list; when empty the section-width architecture is used.
  std::vector<LayerConfig> layers;
  std::array<Index, 4> widths{10, 20, 30, 40};
  int num_layers = 15;
  std::array<WindowSpec, 4> section_windows{};
  HyperParams hyper;
  bool batch_norm = true;
  double solver_tol = 1e-8;
  int solver_max_iters = 500;
};

struct AttackConfig {
  std::string mode = "noise";  // noise | deepfool | shared
  std::vector<double> rhos{0.0, 0.02, 0.04, 0.08, 0.16, 0.32};
  int trials = 5;
  Index limit = 500;  // images used (0 = whole test split)
  int max_iter = 50;
};

struct MiConfig {
  int k = 4;
  Index limit = 1000;
  bool per_epoch = false;  // train: profile after every epoch
};

struct AsymptoticsConfig {
  std::vector<double> gammas{0.5};
  std::vector<double> sigma2s{1.0};
  double lambda = 0.5;
  std::vector<double> ks{0.0};
  Index n = 400;
  int trials = 50;
};

struct CheckGradConfig {
  Index batch = 4;
  double h = 1e-5;
  double threshold = 1e-3;
  std::size_t max_parameters = 500;
};

struct RunConfig {
  std::uint64_t seed = 0;
  bool has_seed = false;
  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig train;
  AttackConfig attack;
  MiConfig mi;
  AsymptoticsConfig asymptotics;
  CheckGradConfig check_grad;
  std::string checkpoint;  // input checkpoint for eval/attack/mi/reconstruct
  std::string split = "test";
  Index reconstruct_count = 4;
};

namespace detail {

class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j.is_object(), ErrorCode::config, field("") + " must be an object");
  }

  std::string field(const std::string& key) const {
    return path_.empty() ? key : (key.empty() ? path_ : path_ + "." + key);
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorCode::config, "config field '" + field(key) + "' has the wrong type");
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const Json& at(const std::string& key) const { return j_.at(key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      require(seen_.count(it.key()) > 0, ErrorCode::config,
              "unknown config key '" + field(it.key()) + "'");
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline WindowSpec read_window(const Json& j, const std::string& path) {
  ObjectReader r(j, path);
  WindowSpec w;
  r.get("window", w.window);
  r.get("stride", w.stride);
  r.finish();
  require(w.valid(), ErrorCode::config, "config field '" + path + "' needs 1 <= stride <= window");
  return w;
}

inline Json window_json(const WindowSpec& w) { return Json{{"window", w.window}, {"stride", w.stride}}; }

inline void check(bool cond, const std::string& field, const std::string& what) {
  require(cond, ErrorCode::config, "config field '" + field + "' " + what);
}

}  // namespace detail

/// Parses and validates a configuration document.
inline RunConfig config_from_json(const Json& root) {
  using detail::check;
  RunConfig c;
  detail::ObjectReader r(root, "");
  if (r.has("seed")) {
    check(root.at("seed").is_number_unsigned(), "seed", "must be a non-negative integer");
    r.get("seed", c.seed);
    c.has_seed = true;
  }
  r.get("checkpoint", c.checkpoint);
  r.get("split", c.split);
  r.get("reconstruct_count", c.reconstruct_count);
  check(c.split == "train" || c.split == "test", "split", "must be \"train\" or \"test\"");
  check(c.reconstruct_count >= 1, "reconstruct_count", "must be >= 1");

  if (r.has("dataset")) {
    detail::ObjectReader d(root.at("dataset"), "dataset");
    auto& ds = c.dataset;
    d.get("kind", ds.kind);
    d.get("path", ds.path);
    d.get("train_limit", ds.train_limit);
    d.get("test_limit", ds.test_limit);
    d.get("classes", ds.classes);
    d.get("train_per_class", ds.train_per_class);
    d.get("test_per_class", ds.test_per_class);
    d.get("side", ds.side);
    d.get("strokes", ds.strokes);
    d.get("noise", ds.noise);
    d.get("data_seed", ds.data_seed);
    d.finish();
    check(ds.kind == "synthetic" || ds.kind == "mnist" || ds.kind == "cifar10", "dataset.kind",
          "must be one of synthetic, mnist, cifar10");
    check(ds.train_limit >= 0, "dataset.train_limit", "must be >= 0");
    check(ds.test_limit >= 0, "dataset.test_limit", "must be >= 0");
    check(ds.classes >= 2, "dataset.classes", "must be >= 2");
    check(ds.train_per_class >= 1, "dataset.train_per_class", "must be >= 1");
    check(ds.test_per_class >= 1, "dataset.test_per_class", "must be >= 1");
    check(ds.side >= 6, "dataset.side", "must be >= 6");
    check(ds.strokes >= 1, "dataset.strokes", "must be >= 1");
    check(ds.noise >= 0, "dataset.noise", "must be >= 0");
  }

  if (r.has("model")) {
    detail::ObjectReader m(root.at("model"), "model");
    auto& mc = c.model;
    if (m.has("input_window")) mc.input_window = detail::read_window(m.at("input_window"), "model.input_window");
    if (m.has("layers")) {
      check(m.at("layers").is_array(), "model.layers", "must be an array");
      for (std::size_t i = 0; i < m.at("layers").size(); ++i) {
        const std::string path = "model.layers[" + std::to_string(i) + "]";
        detail::ObjectReader l(m.at("layers")[i], path);
        LayerConfig lc;
        l.get("atoms", lc.atoms);
        l.get("window", lc.window);
        l.get("stride", lc.stride);
        l.finish();
        check(lc.atoms >= 1, path + ".atoms", "must be >= 1");
        check(lc.stride >= 1 && lc.window >= lc.stride, path, "needs 1 <= stride <= window");
        mc.layers.push_back(lc);
      }
    }
    std::vector<Index> widths(mc.widths.begin(), mc.widths.end());
    m.get("widths", widths);
    check(widths.size() == 4, "model.widths", "must have four entries");
    for (std::size_t i = 0; i < 4; ++i) {
      check(widths[i] >= 1, "model.widths", "entries must be >= 1");
      mc.widths[i] = widths[i];
    }
    m.get("num_layers", mc.num_layers);
    check(mc.num_layers >= 1, "model.num_layers", "must be >= 1");
    if (m.has("section_windows")) {
      const Json& sw = m.at("section_windows");
      check(sw.is_array() && sw.size() == 4, "model.section_windows", "must be an array of four windows");
      for (std::size_t i = 0; i < 4; ++i)
        mc.section_windows[i] =
            detail::read_window(sw[i], "model.section_windows[" + std::to_string(i) + "]");
    }
    m.get("lambda", mc.hyper.lambda);
    m.get("lambda_prime", mc.hyper.lambda_prime);
    m.get("lambda_c", mc.hyper.lambda_c);
    m.get("batch_norm", mc.batch_norm);
    m.get("solver_tol", mc.solver_tol);
    m.get("solver_max_iters", mc.solver_max_iters);
    m.finish();
    check(mc.hyper.lambda >= 0, "model.lambda", "must be >= 0");
    check(mc.hyper.lambda_prime > 0, "model.lambda_prime", "must be > 0");
    check(mc.hyper.lambda_c >= 0, "model.lambda_c", "must be >= 0");
    check(mc.solver_tol > 0, "model.solver_tol", "must be > 0");
    check(mc.solver_max_iters >= 1, "model.solver_max_iters", "must be >= 1");
  }

  if (r.has("train")) {
    detail::ObjectReader t(root.at("train"), "train");
    auto& tc = c.train;
    t.get("eta", tc.eta);
    t.get("epochs", tc.epochs);
    t.get("batch_size", tc.batch_size);
    t.get("lr_decay", tc.lr_decay);
    t.get("eval_limit", tc.eval_limit);
    t.finish();
    check(tc.eta > 0, "train.eta", "must be > 0");
    check(tc.epochs >= 0, "train.epochs", "must be >= 0");
    check(tc.batch_size >= 1, "train.batch_size", "must be >= 1");
    check(tc.lr_decay > 0 && tc.lr_decay <= 1, "train.lr_decay", "must be in (0, 1]");
    check(tc.eval_limit >= 0, "train.eval_limit", "must be >= 0");
  }

  if (r.has("attack")) {
    detail::ObjectReader a(root.at("attack"), "attack");
    auto& ac = c.attack;
    a.get("mode", ac.mode);
    a.get("rhos", ac.rhos);
    a.get("trials", ac.trials);
    a.get("limit", ac.limit);
    a.get("max_iter", ac.max_iter);
    a.finish();
    check(ac.mode == "noise" || ac.mode == "deepfool" || ac.mode == "shared", "attack.mode",
          "must be one of noise, deepfool, shared");
    check(!ac.rhos.empty(), "attack.rhos", "must not be empty");
    for (double rho : ac.rhos) check(rho >= 0, "attack.rhos", "entries must be >= 0");
    check(ac.trials >= 1, "attack.trials", "must be >= 1");
    check(ac.limit >= 0, "attack.limit", "must be >= 0");
    check(ac.max_iter >= 1, "attack.max_iter", "must be >= 1");
  }

  if (r.has("mi")) {
    detail::ObjectReader m(root.at("mi"), "mi");
    m.get("k", c.mi.k);
    m.get("limit", c.mi.limit);
    m.get("per_epoch", c.mi.per_epoch);
    m.finish();
    check(c.mi.k >= 1, "mi.k", "must be >= 1");
    check(c.mi.limit >= 0, "mi.limit", "must be >= 0");
  }

  if (r.has("asymptotics")) {
    detail::ObjectReader a(root.at("asymptotics"), "asymptotics");
    auto& ac = c.asymptotics;
    a.get("gammas", ac.gammas);
    a.get("sigma2s", ac.sigma2s);
    a.get("lambda", ac.lambda);
    a.get("ks", ac.ks);
    a.get("n", ac.n);
    a.get("trials", ac.trials);
    a.finish();
    check(!ac.gammas.empty(), "asymptotics.gammas", "must not be empty");
    for (double g : ac.gammas) check(g > 0, "asymptotics.gammas", "entries must be > 0");
    check(!ac.sigma2s.empty(), "asymptotics.sigma2s", "must not be empty");
    for (double s : ac.sigma2s) check(s >= 0, "asymptotics.sigma2s", "entries must be >= 0");
    check(ac.lambda > 0, "asymptotics.lambda", "must be > 0");
    check(!ac.ks.empty(), "asymptotics.ks", "must not be empty");
    for (double k : ac.ks) check(k >= 0 && k <= 1, "asymptotics.ks", "entries must be in [0, 1]");
    check(ac.n >= 50, "asymptotics.n", "must be >= 50");
    check(ac.trials >= 1, "asymptotics.trials", "must be >= 1");
  }

  if (r.has("check_grad")) {
    detail::ObjectReader g(root.at("check_grad"), "check_grad");
    auto& gc = c.check_grad;
    g.get("batch", gc.batch);
    g.get("h", gc.h);
    g.get("threshold", gc.threshold);
    g.get("max_parameters", gc.max_parameters);
    g.finish();
    check(gc.batch >= 1, "check_grad.batch", "must be >= 1");
    check(gc.h > 0, "check_grad.h", "must be > 0");
    check(gc.threshold > 0, "check_grad.threshold", "must be > 0");
  }
  r.finish();
  c.train.seed = c.seed;
  return c;
}

/// Fully populated document (every default spelled out).
inline Json config_to_json(const RunConfig& c) {
  Json j;
  if (c.has_seed) j["seed"] = c.seed;
  j["checkpoint"] = c.checkpoint;
  j["split"] = c.split;
  j["reconstruct_count"] = c.reconstruct_count;
  const auto& ds = c.dataset;
  j["dataset"] = {{"kind", ds.kind},
                  {"path", ds.path},
                  {"train_limit", ds.train_limit},
                  {"test_limit", ds.test_limit},
                  {"classes", ds.classes},
                  {"train_per_class", ds.train_per_class},
                  {"test_per_class", ds.test_per_class},
                  {"side", ds.side},
                  {"strokes", ds.strokes},
                  {"noise", ds.noise},
                  {"data_seed", ds.data_seed}};
  const auto& mc = c.model;
  Json layers = Json::array();
  for (const auto& l : mc.layers)
    layers.push_back({{"atoms", l.atoms}, {"window", l.window}, {"stride", l.stride}});
  Json sw = Json::array();
  for (const auto& w : mc.section_windows) sw.push_back(detail::window_json(w));
  j["model"] = {{"input_window", detail::window_json(mc.input_window)},
                {"layers", layers},
                {"widths", std::vector<Index>(mc.widths.begin(), mc.widths.end())},
                {"num_layers", mc.num_layers},
                {"section_windows", sw},
                {"lambda", mc.hyper.lambda},
                {"lambda_prime", mc.hyper.lambda_prime},
                {"lambda_c", mc.hyper.lambda_c},
                {"batch_norm", mc.batch_norm},
                {"solver_tol", mc.solver_tol},
                {"solver_max_iters", mc.solver_max_iters}};
  const auto& tc = c.train;
  j["train"] = {{"eta", tc.eta},
                {"epochs", tc.epochs},
                {"batch_size", tc.batch_size},
                {"lr_decay", tc.lr_decay},
                {"eval_limit", tc.eval_limit}};
  const auto& ac = c.attack;
  j["attack"] = {{"mode", ac.mode},
                 {"rhos", ac.rhos},
                 {"trials", ac.trials},
                 {"limit", ac.limit},
                 {"max_iter", ac.max_iter}};
  j["mi"] = {{"k", c.mi.k}, {"limit", c.mi.limit}, {"per_epoch", c.mi.per_epoch}};
  const auto& as = c.asymptotics;
  j["asymptotics"] = {{"gammas", as.gammas}, {"sigma2s", as.sigma2s}, {"lambda", as.lambda},
                      {"ks", as.ks},         {"n", as.n},             {"trials", as.trials}};
  const auto& gc = c.check_grad;
  j["check_grad"] = {{"batch", gc.batch},
                     {"h", gc.h},
                     {"threshold", gc.threshold},
                     {"max_parameters", gc.max_parameters}};
  return j;
}

/// 1-based line of a byte offset.
inline std::size_t line_of_offset(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + std::size_t(std::count(text.begin(), text.begin() + std::ptrdiff_t(offset), '\n'));
}

inline Json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    // byte is 1-based and points just past the offending character.
    const std::size_t off = e.byte > 0 ? e.byte - 1 : 0;
    throw Error(ErrorCode::config, source + ": parse error at line " +
                                       std::to_string(line_of_offset(text, off)) + ": " + e.what());
  }
}

/// Loads a config file. A run manifest (which embeds the config) is accepted
/// as well.
inline RunConfig config_load(const std::string& path) {
  std::ifstream in(path);
  require(bool(in), ErrorCode::config, "cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  Json j = parse_json_text(ss.str(), path);
  if (j.is_object() && j.contains("manifest_version") && j.contains("config")) j = j.at("config");
  return config_from_json(j);
}

inline RunConfig config_parse(const std::string& text) {
  return config_from_json(parse_json_text(text, "<config>"));
}

inline ArchitectureSpec architecture_spec(const RunConfig& c, const GridGeometry& image_shape,
                                          int num_classes) {
  ArchitectureSpec a;
  a.image_shape = image_shape;
  a.input_window = c.model.input_window;
  a.widths = c.model.widths;
  a.section_windows = c.model.section_windows;
  a.num_layers = c.model.num_layers;
  a.num_classes = num_classes;
  a.hyper = c.model.hyper;
  a.batch_norm = c.model.batch_norm;
  return a;
}

/// Untrained model skeleton for the configured architecture.
inline ModelState model_skeleton(const RunConfig& c, const GridGeometry& image_shape,
                                 int num_classes) {
  ModelState m;
  if (c.model.layers.empty()) {
    m = build_architecture(architecture_spec(c, image_shape, num_classes));
  } else {
    m.image_shape = image_shape;
    m.input_window = c.model.input_window;
    std::vector<LayerSpec> specs;
    for (const auto& l : c.model.layers) {
      LayerSpec s;
      s.num_atoms = l.atoms;
      s.window = {l.window, l.stride};
      s.enet.lambda = c.model.hyper.lambda;
      s.enet.lambda_prime = c.model.hyper.lambda_prime;
      s.batch_norm = c.model.batch_norm;
      specs.push_back(s);
    }
    const GeometryChain chain = geometry_chain(image_shape, c.model.input_window, specs);
    for (std::size_t r = 0; r < specs.size(); ++r) {
      Layer layer;
      layer.spec = specs[r];
      layer.dict.atoms = Mat::Zero(chain.layer_inputs[r].channels, specs[r].num_atoms);
      m.layers.push_back(std::move(layer));
    }
    m.classifier.weights = Mat::Zero(num_classes, chain.feature_dim());
    m.classifier.lambda_c = c.model.hyper.lambda_c;
  }
  for (auto& l : m.layers) {
    l.spec.enet.tol = c.model.solver_tol;
    l.spec.enet.max_iters = c.model.solver_max_iters;
  }
  return m;
}

struct DataSplits {
  LabeledImageSet train;
  LabeledImageSet test;
};

/// Dataset root: the configured path, else $DDL_DATA_DIR.
inline std::string dataset_root(const DatasetConfig& d) {
  if (!d.path.empty()) return d.path;
  if (const char* env = std::getenv("DDL_DATA_DIR")) return env;
  throw Error(ErrorCode::config,
              "config field 'dataset.path' is empty and DDL_DATA_DIR is not set");
}

namespace detail {

inline std::string find_data_file(const std::string& root, const std::vector<std::string>& subdirs,
                                   const std::string& name) {
  namespace fs = std::filesystem;
  for (const auto& sub : subdirs) {
    const fs::path p = sub.empty() ? fs::path(root) / name : fs::path(root) / sub / name;
    if (fs::exists(p)) return p.string();
  }
  throw Error(ErrorCode::config, "dataset file " + name + " not found under " + root);
}

}  // namespace detail

inline DataSplits load_dataset(const DatasetConfig& d) {
  DataSplits s;
  if (d.kind == "synthetic") {
    SyntheticImageConfig sc;
    sc.classes = d.classes;
    sc.per_class = d.train_per_class + d.test_per_class;
    sc.side = d.side;
    sc.strokes = d.strokes;
    sc.noise = d.noise;
    sc.seed = d.data_seed;
    const LabeledImageSet all = synthetic_image_set(sc);
    const Index n_train = d.train_per_class * d.classes;
    std::vector<Index> tr, te;
    for (Index i = 0; i < all.size(); ++i) (i < n_train ? tr : te).push_back(i);
    s.train = subset(all, tr);
    s.test = subset(all, te);
  } else if (d.kind == "mnist") {
    const std::string root = dataset_root(d);
    const std::vector<std::string> subs{"", "mnist"};
    s.train = load_mnist(detail::find_data_file(root, subs, "train-images-idx3-ubyte"),
                         detail::find_data_file(root, subs, "train-labels-idx1-ubyte"));
    s.test = load_mnist(detail::find_data_file(root, subs, "t10k-images-idx3-ubyte"),
                        detail::find_data_file(root, subs, "t10k-labels-idx1-ubyte"));
  } else {
    const std::string root = dataset_root(d);
    const std::vector<std::string> subs{"", "cifar-10-batches-bin"};
    std::vector<std::string> train_files;
    for (int b = 1; b <= 5; ++b)
      train_files.push_back(
          detail::find_data_file(root, subs, "data_batch_" + std::to_string(b) + ".bin"));
    s.train = load_cifar10(train_files);
    s.test = load_cifar10({detail::find_data_file(root, subs, "test_batch.bin")});
  }
  if (d.train_limit > 0) s.train = head(s.train, d.train_limit);
  if (d.test_limit > 0) s.test = head(s.test, d.test_limit);
  return s;
}

}  // namespace ddl
