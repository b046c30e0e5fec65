// Command-line front end: train, eval, reconstruct, attack, mi, asymptotics,
// check-grad. Every command writes its outputs plus config.json and
// manifest.json into --out.

#include "ddl/analysis.hpp"
#include "ddl/asymptotics.hpp"
#include "ddl/checkpoint.hpp"
#include "ddl/config.hpp"
#include "ddl/image_io.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace ddl;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  std::string out = "ddl_out";
};

struct Overrides {
  std::optional<int> epochs;
  std::optional<double> eta;
  std::string checkpoint;
  std::string split;
  std::optional<Index> count;
  std::string mode;
  std::optional<double> gamma, sigma2, lambda, k;
  std::optional<int> trials;
  std::optional<Index> n;
};

class Run {
 public:
  Run(std::string command, RunConfig cfg, fs::path out)
      : command_(std::move(command)), cfg_(std::move(cfg)), out_(std::move(out)) {
    fs::create_directories(out_);
  }

  const RunConfig& cfg() const { return cfg_; }
  fs::path path(const std::string& name) const { return out_ / name; }

  /// Registers a file written into the output directory.
  void artifact(const std::string& name) { artifacts_.push_back(name); }

  void write_text(const std::string& name, const std::string& text) {
    std::ofstream f(path(name), std::ios::binary | std::ios::trunc);
    require(bool(f), ErrorCode::io, "cannot write " + path(name).string());
    f << text;
    artifact(name);
  }

  void finish() {
    const Json cfg_json = config_to_json(cfg_);
    write_text("config.json", cfg_json.dump(2) + "\n");
    Json arts = Json::object();
    for (const auto& a : artifacts_) {
      if (a == "config.json") continue;
      std::ifstream in(path(a), std::ios::binary);
      std::vector<unsigned char> b{std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>()};
      char hex[9];
      std::snprintf(hex, sizeof hex, "%08x", crc32_bytes(b));
      arts[a] = {{"crc32", hex}, {"bytes", b.size()}};
    }
    Json manifest = {{"manifest_version", 1},
                     {"command", command_},
                     {"seed", cfg_.seed},
                     {"config", cfg_json},
                     {"artifacts", arts}};
    std::ofstream f(path("manifest.json"), std::ios::binary | std::ios::trunc);
    f << manifest.dump(2) << "\n";
  }

 private:
  std::string command_;
  RunConfig cfg_;
  fs::path out_;
  std::vector<std::string> artifacts_;
};

void require_shape(const ModelState& m, const LabeledImageSet& s) {
  require(m.image_shape == s.shape, ErrorCode::config,
          "checkpoint expects images " + m.image_shape.str() + ", dataset provides " + s.shape.str());
}

std::string checkpoint_path(const RunConfig& c) {
  require(!c.checkpoint.empty(), ErrorCode::config,
          "config field 'checkpoint' is empty (pass --checkpoint)");
  return c.checkpoint;
}

const LabeledImageSet& pick_split(const DataSplits& d, const RunConfig& c) {
  return c.split == "train" ? d.train : d.test;
}

std::string mi_rows(const ModelState& m, const Mat& images, int k) {
  std::ostringstream os;
  const auto prof = layer_mi_profile(m, images, k);
  for (std::size_t r = 0; r < prof.size(); ++r)
    os << (r + 1) << "," << m.epoch << "," << fmt_double(prof[r].value) << "\n";
  return os.str();
}

int cmd_train(Run& run) {
  const RunConfig& c = run.cfg();
  const DataSplits data = load_dataset(c.dataset);
  ModelState model =
      init_model(model_skeleton(c, data.train.shape, data.train.class_count), c.seed);
  std::ofstream metrics(run.path("metrics.csv"), std::ios::binary | std::ios::trunc);
  metrics << "epoch,train_loss,test_acc\n";
  std::ofstream mi;
  Mat mi_images;
  if (c.mi.per_epoch) {
    mi.open(run.path("mi.csv"), std::ios::binary | std::ios::trunc);
    mi << "layer,epoch,mi_nats\n";
    mi_images = (c.mi.limit > 0 ? head(data.test, c.mi.limit) : data.test).images;
    mi << mi_rows(model, mi_images, c.mi.k) << std::flush;
  }
  run_training(model, data.train, data.test, c.train, [&](const EpochMetrics& e) {
    metrics << e.epoch << "," << fmt_double(e.train_loss) << "," << fmt_double(e.test_acc) << "\n"
            << std::flush;
    std::cout << "epoch " << e.epoch << " train_loss=" << e.train_loss
              << " test_acc=" << e.test_acc << std::endl;
    if (c.mi.per_epoch) mi << mi_rows(model, mi_images, c.mi.k) << std::flush;
  });
  metrics.close();
  run.artifact("metrics.csv");
  if (c.mi.per_epoch) {
    mi.close();
    run.artifact("mi.csv");
  }
  save_checkpoint(model, run.path("checkpoint.ddl").string());
  run.artifact("checkpoint.ddl");
  return 0;
}

int cmd_eval(Run& run) {
  const RunConfig& c = run.cfg();
  const ModelState model = load_checkpoint(checkpoint_path(c));
  const DataSplits data = load_dataset(c.dataset);
  const LabeledImageSet& s = pick_split(data, c);
  require_shape(model, s);
  const double acc = evaluate(model, s);
  std::ostringstream os;
  os << "split,count,accuracy\n" << c.split << "," << s.size() << "," << fmt_double(acc) << "\n";
  run.write_text("eval.csv", os.str());
  std::cout << "accuracy " << acc << " on " << s.size() << " " << c.split << " images\n";
  return 0;
}

int cmd_reconstruct(Run& run) {
  const RunConfig& c = run.cfg();
  const ModelState model = load_checkpoint(checkpoint_path(c));
  const DataSplits data = load_dataset(c.dataset);
  const LabeledImageSet& s = pick_split(data, c);
  require_shape(model, s);
  const Index count = std::min(c.reconstruct_count, s.size());
  for (Index i = 0; i < count; ++i) {
    const std::string ext = s.shape.channels == 1 ? ".pgm" : ".ppm";
    const std::string orig = "image" + std::to_string(i) + "_original" + ext;
    write_pnm(run.path(orig).string(), s.images.col(i), s.shape);
    run.artifact(orig);
    for (std::size_t r = 1; r <= model.layers.size(); ++r) {
      const std::string name = "image" + std::to_string(i) + "_layer" + std::to_string(r) + ext;
      write_pnm(run.path(name).string(), reconstruct_from_layer(model, s.images.col(i), r), s.shape);
      run.artifact(name);
    }
  }
  std::cout << "wrote reconstructions of " << count << " images\n";
  return 0;
}

int cmd_attack(Run& run) {
  const RunConfig& c = run.cfg();
  const ModelState model = load_checkpoint(checkpoint_path(c));
  const DataSplits data = load_dataset(c.dataset);
  const LabeledImageSet full = pick_split(data, c);
  const LabeledImageSet s = c.attack.limit > 0 ? head(full, c.attack.limit) : full;
  require_shape(model, s);
  std::vector<PerturbationReport> rows;
  if (c.attack.mode == "noise") {
    rows = noise_robustness_curve(model, s.images, c.attack.rhos, c.attack.trials, c.seed);
  } else {
    const auto clean = predict(model, s.images);
    const Mat v = deepfool_batch(model, s.images, c.attack.max_iter);
    const Mat shared = v.rowwise().mean();
    for (double rho : c.attack.rhos)
      rows.push_back(fooling_rate(model, s.images, clean, c.attack.mode == "shared" ? shared : v,
                                  rho, BudgetMode::clip));
  }
  std::ostringstream os;
  os << "rho,fooling_rate,mean_norm\n";
  for (const auto& r : rows)
    os << fmt_double(r.rho) << "," << fmt_double(r.fooling_rate) << ","
       << fmt_double(r.mean_perturbation_norm) << "\n";
  run.write_text("attack.csv", os.str());
  std::cout << os.str();
  return 0;
}

int cmd_mi(Run& run) {
  const RunConfig& c = run.cfg();
  const DataSplits data = load_dataset(c.dataset);
  const LabeledImageSet full = pick_split(data, c);
  const LabeledImageSet s = c.mi.limit > 0 ? head(full, c.mi.limit) : full;
  const ModelState model = c.checkpoint.empty()
                               ? init_model(model_skeleton(c, s.shape, s.class_count), c.seed)
                               : load_checkpoint(c.checkpoint);
  require_shape(model, s);
  const std::string text = "layer,epoch,mi_nats\n" + mi_rows(model, s.images, c.mi.k);
  run.write_text("mi.csv", text);
  std::cout << text;
  return 0;
}

int cmd_asymptotics(Run& run) {
  const auto& a = run.cfg().asymptotics;
  const auto rows = asym::sweep(a.gammas, a.sigma2s, a.lambda, a.ks, a.n, a.trials, run.cfg().seed);
  std::ostringstream os;
  os << asym::kSweepCsvHeader << "\n";
  for (const auto& r : rows) {
    os << fmt_double(r.prob.gamma) << "," << fmt_double(r.prob.sigma2) << ","
       << fmt_double(r.prob.lambda) << "," << fmt_double(r.prob.k_frac) << ","
       << fmt_double(r.predicted.second_moment) << "," << fmt_double(r.mc.m2) << ","
       << fmt_double(r.mc.m2_stderr) << "," << fmt_double(r.predicted.mse) << ","
       << fmt_double(r.mc.mse) << "\n";
    if (r.mc.nonconverged > 0)
      std::cerr << "warning: " << r.mc.nonconverged << " Monte Carlo trials did not converge at gamma="
                << r.prob.gamma << " sigma2=" << r.prob.sigma2 << " k=" << r.prob.k_frac << "\n";
  }
  run.write_text("asymptotics.csv", os.str());
  std::cout << os.str();
  return 0;
}

int cmd_check_grad(Run& run) {
  const RunConfig& c = run.cfg();
  const DataSplits data = load_dataset(c.dataset);
  const LabeledImageSet batch = head(data.train, c.check_grad.batch);
  const ModelState model =
      init_model(model_skeleton(c, batch.shape, batch.class_count), c.seed);
  FdOptions opt;
  opt.h = c.check_grad.h;
  opt.threshold = c.check_grad.threshold;
  opt.max_parameters = c.check_grad.max_parameters;
  const FdReport rep = finite_difference_check(model, batch.images, batch.labels, opt);
  std::ostringstream os;
  os << "parameter,row,col,analytic,numeric,rel_error,skipped\n";
  for (const auto& e : rep.entries)
    os << e.parameter << "," << e.row << "," << e.col << "," << fmt_double(e.analytic) << ","
       << fmt_double(e.numeric) << "," << fmt_double(e.rel_error) << "," << (e.skipped ? 1 : 0)
       << "\n";
  run.write_text("check_grad.csv", os.str());
  std::cout << "checked " << rep.checked << " skipped " << rep.skipped << " (fraction "
            << rep.skip_fraction << ") max_rel_error " << rep.max_rel_error << " mean_rel_error "
            << rep.mean_rel_error << "\n";
  require(rep.passed(opt.threshold), ErrorCode::solver,
          "check-grad: max relative error " + fmt_double(rep.max_rel_error) + " exceeds " +
              fmt_double(opt.threshold));
  return 0;
}

void print_error(const std::string& code, const std::string& msg) {
  const Json j = {{"status", "error"}, {"code", code}, {"message", msg}};
  std::cerr << j.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep dictionary learning toolkit"};
  app.require_subcommand(1);
  CommonFlags flags;
  Overrides ov;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config, "JSON configuration file");
    sub->add_option("--seed", flags.seed, "random seed (overrides the config)");
    sub->add_option("--threads", flags.threads, "worker threads (0 = all cores)");
    sub->add_option("--out", flags.out, "output directory");
  };
  auto* train = app.add_subcommand("train", "train a model and write checkpoint + metrics");
  auto* eval = app.add_subcommand("eval", "accuracy of a checkpoint on a split");
  auto* recon = app.add_subcommand("reconstruct", "write per-layer image reconstructions");
  auto* attack = app.add_subcommand("attack", "fooling rate under budgeted perturbations");
  auto* mi = app.add_subcommand("mi", "per-layer mutual information with the input");
  auto* asym_cmd = app.add_subcommand("asymptotics", "LASSO predictor vs Monte Carlo sweep");
  auto* grad = app.add_subcommand("check-grad", "finite-difference gradient report");
  for (auto* s : {train, eval, recon, attack, mi, asym_cmd, grad}) add_common(s);
  train->add_option("--epochs", ov.epochs, "number of epochs");
  train->add_option("--eta", ov.eta, "step size");
  for (auto* s : {eval, recon, attack, mi}) {
    s->add_option("--checkpoint", ov.checkpoint, "checkpoint file");
    s->add_option("--split", ov.split, "train or test");
  }
  recon->add_option("--count", ov.count, "number of images");
  attack->add_option("--mode", ov.mode, "noise, deepfool or shared");
  attack->add_option("--trials", ov.trials, "noise directions per budget");
  asym_cmd->add_option("--gamma", ov.gamma, "m/n ratio");
  asym_cmd->add_option("--sigma2", ov.sigma2, "noise variance");
  asym_cmd->add_option("--lambda", ov.lambda, "l1 weight");
  asym_cmd->add_option("--k", ov.k, "nonzero probability of the true vector");
  asym_cmd->add_option("--trials", ov.trials, "Monte Carlo trials");
  asym_cmd->add_option("--n", ov.n, "problem dimension");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    print_error("usage", e.what());
    return 2;
  }
  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();

  RunConfig cfg;
  try {
    cfg = flags.config.empty() ? config_from_json(Json::object()) : config_load(flags.config);
    if (flags.seed) {
      cfg.seed = *flags.seed;
      cfg.has_seed = true;
    }
    require(cfg.has_seed, ErrorCode::config,
            "config field 'seed' is required (set it in the config or pass --seed)");
    cfg.train.seed = cfg.seed;
    if (ov.epochs) cfg.train.epochs = *ov.epochs;
    if (ov.eta) cfg.train.eta = *ov.eta;
    if (!ov.checkpoint.empty()) cfg.checkpoint = ov.checkpoint;
    if (!ov.split.empty()) cfg.split = ov.split;
    if (ov.count) cfg.reconstruct_count = *ov.count;
    if (!ov.mode.empty()) cfg.attack.mode = ov.mode;
    if (ov.trials) (command == "attack" ? cfg.attack.trials : cfg.asymptotics.trials) = *ov.trials;
    if (ov.gamma) cfg.asymptotics.gammas = {*ov.gamma};
    if (ov.sigma2) cfg.asymptotics.sigma2s = {*ov.sigma2};
    if (ov.lambda) cfg.asymptotics.lambda = *ov.lambda;
    if (ov.k) cfg.asymptotics.ks = {*ov.k};
    if (ov.n) cfg.asymptotics.n = *ov.n;
    // Re-validate after overrides.
    const bool seeded = cfg.has_seed;
    const std::uint64_t seed = cfg.seed;
    cfg = config_from_json(config_to_json(cfg));
    cfg.has_seed = seeded;
    cfg.seed = seed;
    cfg.train.seed = seed;
  } catch (const Error& e) {
    print_error(to_string(e.code()), e.what());
    return 2;
  }

  set_max_threads(flags.threads);
  try {
    Run run(command, cfg, flags.out);
    int rc = 0;
    if (command == "train") rc = cmd_train(run);
    else if (command == "eval") rc = cmd_eval(run);
    else if (command == "reconstruct") rc = cmd_reconstruct(run);
    else if (command == "attack") rc = cmd_attack(run);
    else if (command == "mi") rc = cmd_mi(run);
    else if (command == "asymptotics") rc = cmd_asymptotics(run);
    else rc = cmd_check_grad(run);
    run.finish();
    return rc;
  } catch (const Error& e) {
    print_error(to_string(e.code()), e.what());
    return e.code() == ErrorCode::config ? 2 : 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
}
