// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when
// all ten pass.

#include "ddl/analysis.hpp"
#include "ddl/asymptotics.hpp"
#include "ddl/checkpoint.hpp"
#include "ddl/config.hpp"
#include "oracles.hpp"
#include "toy_models.hpp"

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace ddl;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string num(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

std::string mnist_dir() {
  if (const char* env = std::getenv("DDL_DATA_DIR")) {
    const fs::path p(env);
    if (fs::exists(p / "train-images-idx3-ubyte")) return p.string();
    if (fs::exists(p / "mnist" / "train-images-idx3-ubyte")) return (p / "mnist").string();
  }
  return DDL_MNIST_DEFAULT;
}

// ---------------------------------------------------------------------------

Outcome solver_correctness() {
  Stopwatch sw;
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<Index> mdist(10, 30), kdist(20, 60);
  std::uniform_real_distribution<double> lam(0.02, 0.5);
  double worst_gap = 0.0;
  int kkt_fail = 0;
  for (int t = 0; t < 100; ++t) {
    const Index m = mdist(rng), k = kdist(rng);
    const Mat D = oracle::unit_columns(oracle::random_matrix(m, k, rng));
    const Vec x = oracle::random_matrix(m, 1, rng).col(0);
    sparse::ElasticNetParams p{lam(rng), 0.1};
    p.max_iters = 20000;
    p.tol = 1e-12;
    const auto code = sparse::fista_encode(D, x, p);
    const Vec ref = oracle::coordinate_descent(D, x, p.lambda, p.lambda_prime);
    const double f = oracle::enet_objective(D, x, code.coeffs, p.lambda, p.lambda_prime);
    const double g = oracle::enet_objective(D, x, ref, p.lambda, p.lambda_prime);
    worst_gap = std::max(worst_gap, std::abs(f - g));
    if (!sparse::kkt_check(D, x, code, p, 1e-6)) ++kkt_fail;
  }
  const double secs = sw.seconds();
  return {worst_gap <= 1e-8 && kkt_fail == 0 && secs < 30.0,
          "max |objective gap| " + num(worst_gap) + ", KKT failures " + std::to_string(kkt_fail) +
              "/100, " + num(secs, 3) + " s"};
}

Outcome implicit_gradient() {
  Stopwatch sw;
  std::mt19937_64 rng(202);
  double worst = 0.0, skip = 0.0, worst_skip = 0.0;
  std::size_t checked = 0;
  for (int t = 0; t < 20; ++t) {
    const bool two = t % 2 == 0;
    std::vector<toy::ToyLayer> layers =
        two ? std::vector<toy::ToyLayer>{{3, {2, 2}}, {4}} : std::vector<toy::ToyLayer>{{5}};
    const ModelState m =
        toy::make_model({1, 4, 4}, {2, 2}, layers, 3, 300 + t, 0.05, 0.1, 0.01, t % 4 == 1);
    const Mat imgs = toy::random_images(m.image_shape, 4, rng);
    const auto labels = toy::random_labels(4, 3, rng);
    const FdReport rep = finite_difference_check(m, imgs, labels);
    worst = std::max(worst, rep.max_rel_error);
    skip += rep.skip_fraction;
    worst_skip = std::max(worst_skip, rep.skip_fraction);
    checked += rep.checked;
  }
  const double secs = sw.seconds();
  return {worst <= 1e-3 && skip / 20 < 0.2 && secs < 300.0,
          "max rel error " + num(worst) + " over " + std::to_string(checked) +
              " entries, mean skip fraction " + num(skip / 20) + " (max " + num(worst_skip) +
              "), " + num(secs, 3) + " s"};
}

Outcome adjoint_identity() {
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<Index> ch(1, 4), win(1, 4), outd(1, 4);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    const Index w = win(rng);
    std::uniform_int_distribution<Index> st(1, w);
    const WindowSpec spec{w, st(rng)};
    const Index oh = outd(rng), ow = outd(rng);
    const GridGeometry in{ch(rng), (oh - 1) * spec.stride + w, (ow - 1) * spec.stride + w};
    const FeatureGrid x(in, oracle::random_matrix(in.channels, in.cells(), rng));
    const GridGeometry out = window_output(in, spec);
    const FeatureGrid y(out, oracle::random_matrix(out.channels, out.cells(), rng));
    const double lhs = (regroup(x, spec).data.array() * y.data.array()).sum();
    const double rhs = (x.data.array() * regroup_adjoint(y, in, spec).data.array()).sum();
    worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
  }
  return {worst <= 1e-10, "max relative inner-product gap " + num(worst) + " over 50 geometries"};
}

Outcome asymptotic_law() {
  Stopwatch sw;
  const std::vector<double> gammas{0.25, 0.5, 1.0, 2.0}, sigmas{0.5, 1.0, 2.0}, ks{0.0, 0.1};
  const auto rows = asym::sweep(gammas, sigmas, 0.5, ks, 400, 50, 404);
  double worst_m2 = 0.0, worst_mse = 0.0;
  const asym::SweepRow* worst_row = &rows.front();
  int over = 0;
  for (const auto& r : rows) {
    const double e_m2 = std::abs(r.predicted.second_moment - r.mc.m2) / r.mc.m2;
    const double e_mse = std::abs(r.predicted.mse - r.mc.mse) / r.mc.mse;
    over += e_m2 > 0.05 || e_mse > 0.05 ? 1 : 0;
    if (e_m2 > worst_m2) worst_row = &r;
    worst_m2 = std::max(worst_m2, e_m2);
    worst_mse = std::max(worst_mse, e_mse);
  }
  const auto& w = *worst_row;
  const std::string worst_at =
      " (worst at gamma=" + num(w.prob.gamma) + " sigma2=" + num(w.prob.sigma2) + " k=" +
      num(w.prob.k_frac) + ": predicted " + num(w.predicted.second_moment) + ", MC " + num(w.mc.m2) +
      ", " + num(std::abs(w.predicted.second_moment - w.mc.m2) / w.mc.m2_stderr, 3) + " MC std errors)";
  auto at = [&](std::size_t g, std::size_t s, std::size_t k) -> const asym::SweepRow& {
    return rows[(g * sigmas.size() + s) * ks.size() + k];
  };
  bool gamma_trend = true, sigma_trend = true;
  for (std::size_t s = 0; s < sigmas.size(); ++s)
    for (std::size_t k = 0; k < ks.size(); ++k)
      for (std::size_t g = 1; g < gammas.size(); ++g)
        gamma_trend = gamma_trend &&
                      at(g - 1, s, k).predicted.second_moment < at(g, s, k).predicted.second_moment;
  for (std::size_t g = 0; g < gammas.size(); ++g)
    for (std::size_t k = 0; k < ks.size(); ++k)
      for (std::size_t s = 1; s < sigmas.size(); ++s)
        sigma_trend = sigma_trend && at(g, s - 1, k).mc.residual < at(g, s, k).mc.residual;
  const double secs = sw.seconds();
  return {worst_m2 <= 0.05 && worst_mse <= 0.05 && gamma_trend && sigma_trend && secs < 600.0,
          std::to_string(over) + "/24 grid points outside 5%; max rel err E[a^2] " + num(worst_m2) +
              worst_at + ", MSE " + num(worst_mse) +
              "; predicted E[a^2] falls with gamma: " + (gamma_trend ? "yes" : "no") +
              "; MC residual rises with sigma2: " + (sigma_trend ? "yes" : "no") + ", " +
              num(secs, 3) + " s"};
}

// The trained MNIST model is reused by the robustness criterion.
std::optional<ModelState> g_mnist_model;
LabeledImageSet g_mnist_test;

RunConfig mnist_config() {
  return config_parse(R"({
    "seed": 5,
    "dataset": {"kind": "mnist", "train_limit": 10000},
    "model": {"input_window": {"window": 4, "stride": 4},
              "layers": [{"atoms": 64, "window": 7, "stride": 7}, {"atoms": 128}],
              "lambda": 0.1, "lambda_prime": 0.1, "lambda_c": 0.01, "batch_norm": false},
    "train": {"epochs": 15, "batch_size": 32, "eta": 0.3, "lr_decay": 0.9, "eval_limit": 2000}
  })");
}

Outcome mnist_training() {
  Stopwatch sw;
  RunConfig c = mnist_config();
  c.dataset.path = mnist_dir();
  DataSplits data;
  try {
    data = load_dataset(c.dataset);
  } catch (const Error& e) {
    return {false, std::string("MNIST not available: ") + e.what()};
  }
  ModelState m = init_model(model_skeleton(c, data.train.shape, data.train.class_count), c.seed);
  const auto log = run_training(m, data.train, data.test, c.train);
  const double acc = evaluate(m, data.test);
  // learning-curve trend: rank correlation of epoch index and held-out accuracy
  const Index n = Index(log.size());
  std::vector<double> ranks(log.size());
  for (Index i = 0; i < n; ++i) {
    double r = 0.0;
    for (Index j = 0; j < n; ++j)
      r += log[j].test_acc < log[i].test_acc ? 1.0 : log[j].test_acc == log[i].test_acc ? 0.5 : 0.0;
    ranks[std::size_t(i)] = r;
  }
  double num_c = 0.0, den_a = 0.0, den_b = 0.0;
  const double mean_rank = (double(n) - 1) / 2;
  for (Index i = 0; i < n; ++i) {
    const double a = double(i) - mean_rank, b = ranks[std::size_t(i)] - mean_rank;
    num_c += a * b;
    den_a += a * a;
    den_b += b * b;
  }
  const double spearman = num_c / std::sqrt(den_a * den_b);
  std::string curve;
  for (const auto& e : log) curve += (curve.empty() ? "" : " ") + num(e.test_acc, 3);
  const bool trend = spearman >= 0.7 && log.back().test_acc > log.front().test_acc;
  const double secs = sw.seconds();
  g_mnist_model = m;
  g_mnist_test = data.test;
  return {acc >= 0.95 && trend && secs <= 3600.0,
          "test accuracy " + num(acc) + " on " + std::to_string(data.test.size()) + " images after " +
              std::to_string(log.size()) + " epochs on " + std::to_string(data.train.size()) +
              "; per-epoch accuracy (2000 held-out) [" + curve + "], rank correlation " +
              num(spearman, 3) + ", " + num(secs, 4) + " s"};
}

Outcome depth_sweep() {
  Stopwatch sw;
  const char* archs[3] = {
      R"({"input_window": {"window": 12, "stride": 12}, "layers": [{"atoms": 64}]})",
      R"({"input_window": {"window": 4, "stride": 4},
          "layers": [{"atoms": 32, "window": 3, "stride": 3}, {"atoms": 64}]})",
      R"({"input_window": {"window": 2, "stride": 2},
          "layers": [{"atoms": 16, "window": 2, "stride": 2},
                     {"atoms": 32, "window": 3, "stride": 3}, {"atoms": 64}]})"};
  double mean[3], sd[3];
  for (int d = 0; d < 3; ++d) {
    double sum = 0.0, sq = 0.0;
    for (std::uint64_t s = 1; s <= 3; ++s) {
      Json j = Json::parse(R"({
        "dataset": {"kind": "synthetic", "classes": 10, "noise": 0.3, "train_per_class": 50,
                    "test_per_class": 50},
        "train": {"epochs": 15, "eta": 0.3, "batch_size": 16, "lr_decay": 0.9}})");
      j["seed"] = s;
      j["model"] = Json::parse(archs[d]);
      j["model"]["batch_norm"] = false;
      j["model"]["lambda"] = 0.05;
      const RunConfig c = config_from_json(j);
      const DataSplits data = load_dataset(c.dataset);
      ModelState m = init_model(model_skeleton(c, data.train.shape, data.train.class_count), s);
      run_training(m, data.train, data.test, c.train);
      const double acc = evaluate(m, data.test);
      sum += acc;
      sq += acc * acc;
    }
    mean[d] = sum / 3;
    sd[d] = std::sqrt(std::max(0.0, (sq - 3 * mean[d] * mean[d]) / 2));
  }
  bool strict = true, tolerated = true;
  for (int d = 1; d < 3; ++d) {
    if (mean[d] < mean[d - 1]) {
      strict = false;
      if (mean[d] + sd[d] < mean[d - 1] - sd[d - 1]) tolerated = false;
    }
  }
  std::string detail;
  for (int d = 0; d < 3; ++d)
    detail += std::to_string(d + 1) + "-layer " + num(mean[d]) + " +- " + num(sd[d], 2) + "; ";
  detail += strict ? "non-decreasing" : tolerated ? "drop within overlapping 1-sigma bands" : "drop";
  return {tolerated, detail + ", " + num(sw.seconds(), 3) + " s"};
}

Outcome mi_calibration() {
  std::mt19937_64 rng(707);
  const Mat x = oracle::random_matrix(1, 5000, rng), e = oracle::random_matrix(1, 5000, rng);
  const Mat y = 0.9 * x + std::sqrt(1 - 0.81) * e;
  const double truth = -0.5 * std::log(1 - 0.81);
  const double corr = ksg_mi(x, y).value;
  const double indep = ksg_mi(x, oracle::random_matrix(1, 5000, rng)).value;
  return {std::abs(corr - truth) <= 0.05 && std::abs(indep) <= 0.05,
          "rho=0.9: " + num(corr) + " vs " + num(truth) + "; independent: " + num(indep)};
}

Outcome robustness() {
  std::vector<std::string> notes;
  bool ok = true;

  // exact recount and budget on a toy model under both budget modes
  {
    std::mt19937_64 rng(808);
    const ModelState m = toy::make_model({1, 4, 4}, {2, 2}, {{3}}, 3, 8);
    const Mat imgs = toy::random_images(m.image_shape, 200, rng);
    const Mat v = oracle::random_matrix(16, 200, rng);
    const double scale = imgs.colwise().norm().mean();
    int mismatches = 0, over_budget = 0;
    for (double rho : {0.05, 0.2, 0.8})
      for (BudgetMode mode : {BudgetMode::clip, BudgetMode::to_budget}) {
        const auto rep = fooling_rate(m, imgs, v, rho, mode);
        const auto clean = predict(m, imgs);
        Mat pert = imgs;
        for (Index i = 0; i < imgs.cols(); ++i) {
          const Vec a = apply_budget(v.col(i), rho * scale, mode);
          if (a.norm() > rho * scale + 1e-9) ++over_budget;
          pert.col(i) += a;
        }
        const auto after = predict(m, pert);
        Index changed = 0;
        for (std::size_t i = 0; i < after.size(); ++i) changed += after[i] != clean[i] ? 1 : 0;
        if (rep.fooled != changed || rep.fooling_rate != double(changed) / double(imgs.cols()))
          ++mismatches;
      }
    ok = ok && mismatches == 0 && over_budget == 0;
    notes.push_back("recount mismatches " + std::to_string(mismatches) + ", over-budget " +
                    std::to_string(over_budget));
  }

  // closed-form DeepFool on a linear model
  {
    ModelState m;
    m.image_shape = {3, 1, 1};
    m.classifier.weights.resize(2, 3);
    m.classifier.weights << 1.0, 0.5, 5.0, -0.5, 1.0, 5.0;
    Vec x(3), w(3);
    x << 1.0, 0.2, 1.0;
    w << -1.5, 0.5, 0.0;
    const auto r = deepfool_perturbation(m, x);
    const Vec expect = std::abs(w.dot(x)) / w.squaredNorm() * w;
    const double err = (r.boundary - expect).cwiseAbs().maxCoeff();
    ok = ok && r.flipped && err <= 1e-8;
    notes.push_back("linear DeepFool boundary error " + num(err));
  }

  // noise-robustness curve on the trained MNIST model
  if (!g_mnist_model) {
    ok = false;
    notes.push_back("MNIST model unavailable for the noise curve");
  } else {
    const Mat imgs = head(g_mnist_test, 500).images;
    const std::vector<double> rhos{0.0, 0.1, 0.2, 0.4, 0.8, 1.6};
    const auto curve = noise_robustness_curve(*g_mnist_model, imgs, rhos, 5, 809);
    bool mono = curve.front().fooling_rate == 0.0 && curve.back().fooling_rate > 0.0;
    std::string pts;
    for (std::size_t r = 0; r < curve.size(); ++r) {
      if (r > 0 && curve[r].fooling_rate < curve[r - 1].fooling_rate) mono = false;
      if (curve[r].mean_perturbation_norm > rhos[r] * mean_column_norm(imgs) + 1e-9) mono = false;
      pts += (pts.empty() ? "" : " ") + num(rhos[r], 2) + ":" + num(curve[r].fooling_rate, 3);
    }
    ok = ok && mono;
    notes.push_back(std::string("MNIST noise curve [") + pts + "] " + (mono ? "monotone" : "not monotone"));
  }
  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : "; ") + n;
  return {ok, detail};
}

// ---------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(DDL_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Byte-compares every file of two output directories.
bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
  std::vector<std::string> names_a, names_b;
  for (const auto& e : fs::directory_iterator(a)) names_a.push_back(e.path().filename().string());
  for (const auto& e : fs::directory_iterator(b)) names_b.push_back(e.path().filename().string());
  std::sort(names_a.begin(), names_a.end());
  std::sort(names_b.begin(), names_b.end());
  if (names_a != names_b) {
    why = "file lists differ";
    return false;
  }
  for (const auto& n : names_a)
    if (slurp(a / n) != slurp(b / n)) {
      why = n + " differs";
      return false;
    }
  return true;
}

Outcome reproducibility() {
  const fs::path dir = fs::temp_directory_path() / "ddl_acceptance_repro";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "cfg.json") << R"({
    "seed": 9,
    "dataset": {"kind": "synthetic", "classes": 4, "train_per_class": 20, "test_per_class": 20, "side": 8},
    "model": {"input_window": {"window": 3, "stride": 1},
              "layers": [{"atoms": 6, "window": 2, "stride": 2}, {"atoms": 8}]},
    "train": {"epochs": 2, "batch_size": 8},
    "attack": {"limit": 40, "trials": 3},
    "mi": {"limit": 60, "per_epoch": true},
    "asymptotics": {"gammas": [0.5, 1.0], "sigma2s": [1.0], "ks": [0.0, 0.1], "n": 100, "trials": 5}
  })";
  std::ofstream(dir / "grad.json") << R"({
    "seed": 9,
    "dataset": {"kind": "synthetic", "classes": 4, "train_per_class": 5, "test_per_class": 5, "side": 6},
    "model": {"input_window": {"window": 2, "stride": 2},
              "layers": [{"atoms": 3, "window": 3, "stride": 3}, {"atoms": 4}]}
  })";
  const std::string cfg = (dir / "cfg.json").string();
  const std::string ckpt = (dir / "train_a" / "checkpoint.ddl").string();
  const std::vector<std::pair<std::string, std::string>> commands{
      {"train", "train --config " + cfg},
      {"eval", "eval --config " + cfg + " --checkpoint " + ckpt},
      {"reconstruct", "reconstruct --config " + cfg + " --checkpoint " + ckpt},
      {"attack-noise", "attack --config " + cfg + " --checkpoint " + ckpt},
      {"attack-deepfool", "attack --mode deepfool --config " + cfg + " --checkpoint " + ckpt},
      {"attack-shared", "attack --mode shared --config " + cfg + " --checkpoint " + ckpt},
      {"mi", "mi --config " + cfg + " --checkpoint " + ckpt},
      {"asymptotics", "asymptotics --config " + cfg},
      {"check-grad", "check-grad --config " + (dir / "grad.json").string()}};
  bool ok = true;
  std::string detail;
  for (const auto& [name, args] : commands) {
    const fs::path a = dir / (name + "_a"), b = dir / (name + "_b");
    const int ra = run_cli(args + " --out " + a.string(), dir / (name + "_a.log"));
    const int rb = run_cli(args + " --out " + b.string(), dir / (name + "_b.log"));
    std::string why;
    bool same = ra == 0 && rb == 0;
    if (!same) why = "exit codes " + std::to_string(ra) + "/" + std::to_string(rb);
    same = same && same_tree(a, b, why);
    ok = ok && same;
    detail += (detail.empty() ? "" : ", ") + name + (same ? " identical" : " DIFFERS (" + why + ")");
  }
  if (ok) fs::remove_all(dir);
  return {ok, detail};
}

Outcome checkpoint_round_trip() {
  std::mt19937_64 rng(1010);
  SyntheticImageConfig sc;
  sc.per_class = 10;
  sc.side = 8;
  const auto data = synthetic_image_set(sc);
  ModelState m = toy::make_model({1, 8, 8}, {3, 1}, {{6, {2, 2}}, {8}}, 4, 11, 0.05, 0.1, 0.01, true);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  run_training(m, data, data, tc);

  const fs::path path = fs::temp_directory_path() / "ddl_acceptance.ddl";
  save_checkpoint(m, path.string());
  ModelState back = load_checkpoint(path.string());
  bool ok = bit_identical(m, back) && serialize(back) == serialize(m);
  // the restored RNG continues the same stream
  ok = ok && m.rng() == back.rng();

  const auto bytes = serialize(m);
  int detected = 0, trials = 0;
  std::uniform_int_distribution<std::size_t> pos(16, bytes.size() - 5);
  for (int t = 0; t < 50; ++t) {
    auto bad = bytes;
    bad[pos(rng)] ^= 0x5a;
    ++trials;
    try {
      deserialize(bad);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::checksum) ++detected;
    }
  }
  fs::remove(path);
  ok = ok && detected == trials;
  return {ok, std::string("round trip ") + (bit_identical(m, back) ? "bit-exact" : "differs") +
                  ", corrupted body bytes detected by checksum " + std::to_string(detected) + "/" +
                  std::to_string(trials) + " (" + std::to_string(bytes.size()) + "-byte checkpoint)"};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, Outcome (*)()>> criteria{
      {"solver correctness", solver_correctness},
      {"implicit gradient", implicit_gradient},
      {"regroup adjoint", adjoint_identity},
      {"asymptotic LASSO law", asymptotic_law},
      {"MNIST training", mnist_training},
      {"depth sweep", depth_sweep},
      {"MI calibration", mi_calibration},
      {"robustness harness", robustness},
      {"reproducibility", reproducibility},
      {"checkpoint round trip", checkpoint_round_trip}};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << "criterion " << (i + 1) << " " << (o.pass ? "PASS" : "FAIL") << " " << criteria[i].first
              << ": " << o.detail << std::endl;
  }
  std::cout << (criteria.size() - std::size_t(failed)) << "/" << criteria.size() << " criteria passed"
            << std::endl;
  return failed == 0 ? 0 : 1;
}
