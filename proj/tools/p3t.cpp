// p3t: command-line driver for data generation, pretraining, prompt tuning
// and the evaluation protocols.

#include <algorithm>
#include <cstdlib>
#include <memory>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "p3t/gradcheck.hpp"
#include "p3t/io.hpp"
#include "p3t/trainer.hpp"

namespace fs = std::filesystem;
using namespace p3t;

namespace {

constexpr int kOk = 0;
constexpr int kArgumentError = 1;
constexpr int kRuntimeError = 2;

struct Common {
  std::string config;
  std::string data;
  std::string out;
  std::string model;
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  std::optional<std::string> strategy;
  std::optional<double> beta;
  std::optional<double> gamma;
  std::optional<double> lambda;
  std::optional<std::size_t> epochs;
};

std::string num(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

// Config file first, then flags; the result is validated.
train::TrainConfig resolve(const Common& o) {
  train::TrainConfig c = o.config.empty() ? train::TrainConfig{} : train::load_config(o.config);
  if (o.seed) train::set_config_value(c, "seed", std::to_string(*o.seed));
  if (o.alpha) train::set_config_value(c, "alpha", num(*o.alpha));
  if (o.strategy) train::set_config_value(c, "strategy", *o.strategy);
  if (o.beta) train::set_config_value(c, "beta", num(*o.beta));
  if (o.gamma) train::set_config_value(c, "gamma", num(*o.gamma));
  if (o.lambda) train::set_config_value(c, "lambda", num(*o.lambda));
  if (o.epochs) train::set_config_value(c, "epochs", std::to_string(*o.epochs));
  if (!o.model.empty()) c.model = o.model;
  if (!o.data.empty()) {
    c.train_data = (fs::path(o.data) / "train.csv").string();
    c.test_data = (fs::path(o.data) / "test.csv").string();
  }
  train::validate(c);
  return c;
}

enc::FrozenModel load_model(const train::TrainConfig& c) {
  if (c.model.empty()) {
    throw geom::ArgumentError("no frozen model given; pass --model or set `model` in the config (see `p3t pretrain`)");
  }
  return enc::FrozenModel::load(c.model);
}

std::string require_path(const std::string& p, const std::string& what) {
  if (p.empty()) throw geom::ArgumentError("missing " + what);
  return p;
}

struct Split {
  std::vector<geom::PointCloud> clouds;
  std::vector<std::string> categories;
};

Split load_split(const std::string& manifest) {
  const auto m = data::read_manifest(manifest);
  return {data::load_clouds(m), m.categories()};
}

train::Prepared prepare(const enc::FrozenModel& model, const train::TrainConfig& c, const Split& s) {
  return train::prepare(model, s.clouds, s.categories, c.patches, c.patch_points);
}

void echo_config(const train::TrainConfig& c, const fs::path& dir) {
  fs::create_directories(dir);
  io::write_file_atomic(dir / "config.txt", train::to_text(c));
  std::cerr << train::to_text(c);
}

template <class T>
std::vector<T> parse_list(const std::string& text, const std::string& flag) {
  std::vector<T> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !is.eof()) throw geom::ArgumentError(flag + ": cannot parse '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw geom::ArgumentError(flag + ": empty list");
  return out;
}

std::vector<std::string> split_names(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

void add_config(CLI::App* cmd, Common& o) {
  cmd->add_option("--config", o.config, "flat key = value config file (see `p3t train --help`)");
}
CLI::Option* add_data(CLI::App* cmd, Common& o, const std::string& what) {
  return cmd->add_option("--data", o.data, what);
}
void add_model(CLI::App* cmd, Common& o) {
  cmd->add_option("--model", o.model, "frozen model file (.p3tw); overrides `model` in the config");
}
void add_overrides(CLI::App* cmd, Common& o) {
  cmd->add_option("--seed", o.seed, "run seed [default: config seed, 0]");
  cmd->add_option("--alpha", o.alpha, "prompt ratio in (0, 1] [default: 0.5]")->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--strategy", o.strategy, "target selection [default: vulnerable]")
      ->check(CLI::IsMember({"vulnerable", "critical", "random"}));
  cmd->add_option("--beta", o.beta, "prototype loss weight >= 0 [default: 1]")->check(CLI::NonNegativeNumber);
  cmd->add_option("--gamma", o.gamma, "geometric loss weight >= 0 [default: 0.1]")->check(CLI::NonNegativeNumber);
  cmd->add_option("--lambda", o.lambda, "consistency loss weight >= 0 [default: 1]")->check(CLI::NonNegativeNumber);
  cmd->add_option("--epochs", o.epochs, "tuning epochs >= 0 [default: 4]");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Point-cloud prompt tuning against a frozen dual encoder."};
  app.require_subcommand(1);
  app.footer("Exit codes: 0 success, 1 argument or config error, 2 runtime, I/O or numeric error.\n"
             "P3T_THREADS (positive integer, default 1) sets evaluation threads.");
  Common o;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset (manifests + P3PC files)");
  std::string preset = "desk8";
  std::uint64_t gen_seed = 0;
  gen->add_option("--name", preset, "preset: desk8 | pretrain | cross-source | cross-narrow | cross-light | "
                                    "cross-heavy | all")
      ->capture_default_str();
  gen->add_option("--seed", gen_seed, "generation seed")->capture_default_str();
  gen->add_option("--out", o.out, "output root; the dataset lands in <out>/<name>")->required();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "align and freeze a dual encoder on a pretraining dataset");
  add_config(pre, o);
  add_data(pre, o, "dataset directory holding train.csv (and optionally test.csv)")->required();
  pre->add_option("--out", o.out, "model file to write (.p3tw)")->required();
  pre->add_option("--seed", o.seed, "pretraining seed [default: config seed, 0]");
  std::string vocab;
  pre->add_option("--categories", vocab, "comma-separated vocabulary [default: all eight shape families]");

  // train
  auto* tr = app.add_subcommand("train", "prompt-tune against a frozen model");
  add_config(tr, o);
  add_data(tr, o, "dataset directory holding train.csv and test.csv");
  tr->add_option("--out", o.out, "run directory")->required();
  add_model(tr, o);
  add_overrides(tr, o);
  tr->add_option("--checkpoint", o.checkpoint, "resume from this checkpoint");
  tr->footer(train::config_reference());

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate")->required();
  add_data(ev, o, "dataset directory; defaults to the checkpoint's own data");
  add_model(ev, o);
  std::string split = "test";
  ev->add_option("--split", split, "train | test")->check(CLI::IsMember({"train", "test"}))->capture_default_str();

  // zero-shot
  auto* zs = app.add_subcommand("zero-shot", "classify with handcrafted prompts and no tuning");
  add_config(zs, o);
  add_data(zs, o, "dataset directory holding test.csv")->required();
  add_model(zs, o);

  // few-shot
  auto* fs_cmd = app.add_subcommand("few-shot", "tune on k-shot subsets and evaluate on the full test split");
  add_config(fs_cmd, o);
  add_data(fs_cmd, o, "dataset directory")->required();
  fs_cmd->add_option("--out", o.out, "CSV file to write")->required();
  add_model(fs_cmd, o);
  add_overrides(fs_cmd, o);
  std::string shots = "1,2,4,8,16";
  std::string seeds = "0,1,2";
  fs_cmd->add_option("--shots", shots, "comma-separated shots per category")->capture_default_str();
  fs_cmd->add_option("--seeds", seeds, "comma-separated run seeds")->capture_default_str();

  // cross-eval
  auto* cx = app.add_subcommand("cross-eval", "tune on a source dataset, evaluate unchanged on targets");
  add_config(cx, o);
  add_data(cx, o, "source dataset directory")->required();
  cx->add_option("--out", o.out, "CSV file to write")->required();
  add_model(cx, o);
  add_overrides(cx, o);
  std::string targets;
  std::string lambdas = "0,1";
  cx->add_option("--targets", targets, "comma-separated target dataset directories")->required();
  cx->add_option("--lambdas", lambdas, "comma-separated consistency weights")->capture_default_str();
  cx->add_option("--seeds", seeds, "comma-separated run seeds")->capture_default_str();

  // ablate
  auto* ab = app.add_subcommand("ablate", "cartesian sweep over ablation axes");
  add_config(ab, o);
  add_data(ab, o, "dataset directory")->required();
  ab->add_option("--out", o.out, "CSV file to write")->required();
  add_model(ab, o);
  add_overrides(ab, o);
  std::string axes = "strategy,alpha";
  ab->add_option("--axes", axes, "comma-separated: strategy, alpha, prompters, encoder, offset, loss")
      ->capture_default_str();

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every objective on a micro instance");
  train::MicroInstanceOptions micro;
  gc->add_option("--seed", micro.seed, "instance seed")->capture_default_str();
  gc->add_option("--step", micro.h, "central difference step")->capture_default_str();

  // export-embeddings
  auto* ex = app.add_subcommand("export-embeddings", "write prompted (and unprompted) embeddings as CSV");
  ex->add_option("--checkpoint", o.checkpoint, "checkpoint")->required();
  add_data(ex, o, "dataset directory; defaults to the checkpoint's own data");
  ex->add_option("--out", o.out, "CSV file to write")->required();
  add_model(ex, o);
  ex->add_option("--split", split, "train | test")->check(CLI::IsMember({"train", "test"}))->capture_default_str();
  bool both = false;
  ex->add_flag("--with-unprompted", both, "append unprompted embeddings after the prompted rows");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kArgumentError;
  }

  try {
    if (gen->parsed()) {
      const auto names = preset == "all" ? data::preset_names() : std::vector<std::string>{preset};
      for (const auto& n : names) std::cout << data::generate_dataset(data::preset(n, gen_seed), o.out).string() << '\n';
      return kOk;
    }

    if (pre->parsed()) {
      const auto c = resolve(o);
      std::cerr << train::to_text(c);
      const auto tr_split = load_split(c.train_data);
      auto cats = vocab.empty() ? data::family_names() : split_names(vocab);
      for (const auto& name : tr_split.categories) {
        if (std::find(cats.begin(), cats.end(), name) == cats.end()) {
          throw geom::ArgumentError("training category '" + name + "' is not in the vocabulary");
        }
      }
      const auto model = train::pretrain_model(c, tr_split.clouds, cats, true);
      model.save(o.out);
      std::cout << "model " << o.out << " hash " << model.weights_hash() << '\n';
      if (fs::exists(c.test_data)) {
        const auto te = load_split(c.test_data);
        std::cout << "zero_shot " << train::zero_shot_accuracy(model, prepare(model, c, te)) << '\n';
      }
      return kOk;
    }

    if (tr->parsed()) {
      auto c = resolve(o);
      const auto model = load_model(c);
      const auto ptr = prepare(model, c, load_split(require_path(c.train_data, "--data or train_data")));
      const auto pte = prepare(model, c, load_split(require_path(c.test_data, "--data or test_data")));
      std::unique_ptr<train::Trainer> t;
      if (!o.checkpoint.empty()) {
        t = train::Trainer::load_checkpoint(o.checkpoint, model, ptr, pte);
        if (o.epochs) t->set_epochs(*o.epochs);
      } else {
        t = std::make_unique<train::Trainer>(c, model, ptr, pte);
      }
      echo_config(t->config(), o.out);
      const auto r = train::tune(*t, model, o.out, true);
      std::cout << "zero_shot " << r.zero_shot << "\ntest_accuracy " << r.final_test.accuracy << "\n#LP "
                << t->learnable_params() << '\n';
      return kOk;
    }

    if (ev->parsed() || ex->parsed()) {
      auto c = train::checkpoint_config(o.checkpoint);
      if (!o.model.empty()) c.model = o.model;
      std::cerr << train::to_text(c);
      const auto model = load_model(c);
      const auto ptr = prepare(model, c, load_split(c.train_data));
      const auto pte = prepare(model, c, load_split(c.test_data));
      const auto t = train::Trainer::load_checkpoint(o.checkpoint, model, ptr, pte);
      const train::Prepared* target = split == "train" ? &t->train_set() : &t->test_set();
      train::Prepared other;
      if (!o.data.empty()) {
        other = prepare(model, c, load_split((fs::path(o.data) / (split + ".csv")).string()));
        target = &other;
      }
      if (ex->parsed()) {
        train::export_embeddings(*t, *target, o.out, both);
        std::cout << o.out << '\n';
        return kOk;
      }
      const auto r = t->evaluate(*target);
      std::cout << "accuracy " << r.accuracy << "\nce " << r.loss.ce << "\nproto " << r.loss.proto << "\nreg "
                << r.loss.reg << "\ncon " << r.loss.con << "\ntotal " << r.loss.total << "\nviolation "
                << r.violation << '\n';
      return kOk;
    }

    if (zs->parsed()) {
      const auto c = resolve(o);
      std::cerr << train::to_text(c);
      const auto model = load_model(c);
      std::cout << "zero_shot " << train::zero_shot_accuracy(model, prepare(model, c, load_split(c.test_data)))
                << '\n';
      return kOk;
    }

    if (fs_cmd->parsed()) {
      const auto c = resolve(o);
      const auto model = load_model(c);
      echo_config(c, fs::path(o.out).parent_path().empty() ? "." : fs::path(o.out).parent_path());
      const auto ptr = prepare(model, c, load_split(c.train_data));
      const auto pte = prepare(model, c, load_split(c.test_data));
      const auto s = parse_list<std::size_t>(shots, "--shots");
      const auto sd = parse_list<std::uint64_t>(seeds, "--seeds");
      const auto rows = train::few_shot_run(c, model, ptr, pte, s, sd);
      const auto csv = train::few_shot_csv(rows);
      io::write_file_atomic(o.out, csv);
      std::cout << csv;
      return kOk;
    }

    if (cx->parsed()) {
      const auto c = resolve(o);
      const auto model = load_model(c);
      echo_config(c, fs::path(o.out).parent_path().empty() ? "." : fs::path(o.out).parent_path());
      const auto ptr = prepare(model, c, load_split(c.train_data));
      const auto pte = prepare(model, c, load_split(c.test_data));
      std::vector<train::Prepared> tg;
      std::vector<std::string> names;
      for (const auto& dir : split_names(targets)) {
        tg.push_back(prepare(model, c, load_split((fs::path(dir) / "test.csv").string())));
        names.push_back(fs::path(dir).filename().string());
      }
      const auto l = parse_list<double>(lambdas, "--lambdas");
      const auto sd = parse_list<std::uint64_t>(seeds, "--seeds");
      const auto rows = train::cross_dataset_run(c, model, ptr, pte, tg, l, sd);
      const auto csv = train::cross_csv(rows, names);
      io::write_file_atomic(o.out, csv);
      std::cout << csv;
      return kOk;
    }

    if (ab->parsed()) {
      const auto c = resolve(o);
      const auto model = load_model(c);
      echo_config(c, fs::path(o.out).parent_path().empty() ? "." : fs::path(o.out).parent_path());
      const auto ptr = prepare(model, c, load_split(c.train_data));
      const auto pte = prepare(model, c, load_split(c.test_data));
      const auto table = train::ablate(c, model, ptr, pte, split_names(axes));
      io::write_file_atomic(o.out, table.csv());
      std::cout << table.csv();
      return kOk;
    }

    if (gc->parsed()) {
      const auto report = train::micro_gradient_check(micro);
      double worst = 0.0;
      for (const auto& t : report) {
        std::cout << t.term << " value " << t.value << " max_rel_error " << t.report.max_rel_error << " checked "
                  << t.report.checked << " worst " << t.report.worst.name << '[' << t.report.worst.index << "]\n";
        worst = std::max(worst, t.report.max_rel_error);
      }
      const bool ok = worst < 1e-4;
      std::cout << (ok ? "PASS" : "FAIL") << " max_rel_error " << worst << " (limit 1e-4)\n";
      return ok ? kOk : kRuntimeError;
    }
  } catch (const geom::ArgumentError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kArgumentError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}
