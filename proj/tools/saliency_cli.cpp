// saliency: command-line front end for the saliency library.
//
// The first line on stdout is always "ok <command>" or "error <code>"; the
// human-readable error message goes to stderr. Exit status: 0 success,
// 1 usage or input error, 2 verification failure.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "saliency/saliency.hpp"

namespace fs = std::filesystem;
using namespace saliency;

namespace {

constexpr const char* kReportSchema = "saliency-report/1";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct VerificationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<AttachPoint> parse_layers(const std::string& s) {
  std::vector<AttachPoint> out;
  for (const auto& item : split(s, ',')) out.push_back(parse_attach(item));
  if (out.empty()) throw UsageError("empty layer list");
  return out;
}

AttachPoint attach_from(const std::string& layer, const std::string& side) {
  if (side != "in" && side != "out") throw UsageError("--side must be 'in' or 'out'");
  return {layer, side == "in" ? Side::Input : Side::Output};
}

std::optional<MetaConfig> meta_from(const std::optional<double>& eps, const std::string& dir) {
  if (!eps) return std::nullopt;
  MetaConfig cfg;
  cfg.epsilon = *eps;
  if (dir == "d" || dir == "descent") {
    cfg.direction = MetaDirection::Descent;
  } else if (dir == "a" || dir == "ascent") {
    cfg.direction = MetaDirection::Ascent;
  } else {
    throw UsageError("--meta-dir must be 'd' or 'a'");
  }
  return cfg;
}

ModelGraph open_model(const std::string& path) {
  if (!fs::exists(path)) throw std::runtime_error("model file not found: " + path);
  return load_model(path);
}

ShapesDataset open_data(const std::string& dir, std::size_t limit) {
  if (!fs::exists(fs::path(dir) / "index.json")) {
    throw std::runtime_error("dataset not found: " + dir);
  }
  ShapesDataset ds = load_dataset(dir);
  if (limit > 0 && limit < ds.size()) {
    ds.images.resize(limit);
    ds.labels.resize(limit);
    ds.annotations.resize(limit);
  }
  return ds;
}

Tensor open_image(const std::string& path, const ModelGraph& model) {
  if (!fs::exists(path)) throw std::runtime_error("image not found: " + path);
  Tensor img = read_pnm(path);
  if (img.shape() != model.input_shape) {
    throw std::invalid_argument("image " + shape_str(img.shape()) +
                                " does not match model input " + shape_str(model.input_shape));
  }
  return img;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

fs::path sibling(const fs::path& out, const std::string& suffix) {
  fs::path p = out;
  p.replace_extension();
  return p.string() + suffix;
}

bool wants_color(const fs::path& out) { return out.extension() == ".ppm"; }

// Columns: schema,metric,image_id,class,tag,value. Record rows come first,
// followed by summary rows whose image_id is "*" and whose tag names the
// statistic (suffixed by the record tag when there are several).
void write_report(const fs::path& path, const std::vector<EvalReport>& reports) {
  auto out = open_out(path);
  out << "schema,metric,image_id,class,tag,value\n";
  for (const auto& rep : reports) {
    for (const auto& r : rep.records) {
      out << kReportSchema << ',' << rep.metric << ',' << r.image_id << ',' << r.cls << ','
          << r.tag << ',' << format_double(r.value) << '\n';
    }
  }
  for (const auto& rep : reports) {
    const std::string tag = rep.records.empty() ? std::string() : rep.records.front().tag;
    const std::string suffix = tag.empty() ? "" : ":" + tag;
    auto row = [&](const std::string& stat, double v, const std::string& cls = "*") {
      out << kReportSchema << ',' << rep.metric << ",*," << cls << ',' << stat << suffix << ','
          << format_double(v) << '\n';
    };
    row("mean", rep.mean);
    row("stddev", rep.stddev);
    for (const auto& [cls, v] : rep.per_class) row("class_mean", v, std::to_string(cls));
    row("score", rep.score);
  }
}

void write_weights(const fs::path& path, const LayerWeights& w) {
  auto out = open_out(path);
  out << "schema,scheme,layer,raw,gamma\n";
  for (std::size_t j = 0; j < w.gamma.size(); ++j) {
    out << "saliency-weights/1," << to_string(w.scheme) << ',' << w.gamma[j].first << ','
        << format_double(w.raw[j]) << ',' << format_double(w.gamma[j].second) << '\n';
  }
}

void emit_map(const fs::path& out, const SaliencyMap& map) {
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_heatmap(out, map, wants_color(out));
  write_map_csv(sibling(out, ".csv"), map);
}

// Sample used by the data-driven weighting schemes: the first `n` images.
std::pair<std::vector<Tensor>, std::vector<std::size_t>> weight_sample(const ShapesDataset& ds,
                                                                       std::size_t n) {
  n = std::min(n, ds.size());
  return {std::vector<Tensor>(ds.images.begin(), ds.images.begin() + static_cast<long>(n)),
          std::vector<std::size_t>(ds.labels.begin(), ds.labels.begin() + static_cast<long>(n))};
}

SaliencyMap oracle_map(const Annotation& ann, std::size_t h, std::size_t w) {
  SaliencyMap m(h, w);
  for (const auto& b : ann.boxes) {
    for (int r = b.top; r <= b.bottom; ++r) {
      for (int c = b.left; c <= b.right; ++c) {
        m.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = 1.0;
      }
    }
  }
  m.layer = {"oracle", Side::Output};
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backpropagation saliency maps on a small CNN"};
  app.require_subcommand(1);

  // train-toy
  auto* train = app.add_subcommand("train-toy", "train the toy network on generated shapes");
  std::string train_out;
  ToyConfig toy;
  train->add_option("--out", train_out, "model file")->required();
  train->add_option("--seed", toy.seed, "seed for data, init and shuffling");
  train->add_option("--epochs", toy.epochs, "training epochs");
  train->add_option("--lr", toy.lr, "SGD learning rate");
  train->add_option("--classes", toy.num_classes, "number of classes");
  train->add_option("--n", toy.images, "training images");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic shapes dataset");
  std::string gen_out;
  std::size_t gen_n = 100, gen_classes = 2;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n", gen_n, "number of images");
  gen->add_option("--classes", gen_classes, "number of classes");
  gen->add_option("--seed", gen_seed, "generator seed");

  // shared options
  std::string model_path, data_dir, image_path, method_name, layer, side = "out", out;
  std::size_t cls = 0, limit = 0;
  std::optional<double> meta_eps;
  std::string meta_dir = "d";

  auto* sal = app.add_subcommand("saliency", "saliency map for one image");
  sal->add_option("--model", model_path)->required();
  sal->add_option("--image", image_path)->required();
  sal->add_option("--class", cls)->required();
  sal->add_option("--method", method_name)->required();
  sal->add_option("--layer", layer)->required();
  sal->add_option("--side", side, "in|out");
  sal->add_option("--meta-eps", meta_eps);
  sal->add_option("--meta-dir", meta_dir, "d|a");
  sal->add_option("--out", out, ".pgm or .ppm heatmap; raw map written next to it")->required();

  auto* comb = app.add_subcommand("combine", "multi-layer combined saliency for one image");
  std::string scheme_name, mode_name, layers_arg = "relu1,relu2,relu3";
  std::size_t sample = 100;
  comb->add_option("--model", model_path)->required();
  comb->add_option("--image", image_path)->required();
  comb->add_option("--class", cls)->required();
  comb->add_option("--method", method_name)->required();
  comb->add_option("--scheme", scheme_name, "spread|accuracy|linear|uniform")->required();
  comb->add_option("--mode", mode_name, "add|prod")->required();
  comb->add_option("--layers", layers_arg);
  comb->add_option("--data", data_dir, "sample for the spread and accuracy schemes");
  comb->add_option("--sample", sample, "images used to fit weights");
  comb->add_option("--out", out)->required();

  auto* cs = app.add_subcommand("class-sensitivity", "max-min class Spearman correlation");
  cs->add_option("--model", model_path)->required();
  cs->add_option("--data", data_dir)->required();
  cs->add_option("--method", method_name)->required();
  cs->add_option("--layer", layer)->required();
  cs->add_option("--side", side, "in|out");
  cs->add_option("--meta-eps", meta_eps);
  cs->add_option("--meta-dir", meta_dir, "d|a");
  cs->add_option("--limit", limit, "use only the first N images");
  cs->add_option("--out", out)->required();

  auto* pg = app.add_subcommand("pointing-game", "weak localisation accuracy");
  std::string combine_arg;
  int tol = kPointingTolerance;
  pg->add_option("--model", model_path);
  pg->add_option("--data", data_dir)->required();
  pg->add_option("--method", method_name, "saliency method or 'oracle'")->required();
  pg->add_option("--layers", layers_arg);
  pg->add_option("--combine", combine_arg, "scheme,mode");
  pg->add_option("--sample", sample, "images used to fit weights");
  pg->add_option("--tol", tol);
  pg->add_option("--limit", limit, "use only the first N images");
  pg->add_option("--out", out)->required();

  auto* sc = app.add_subcommand("sanity-check", "cascading weight randomisation");
  std::uint64_t seed = 0;
  sc->add_option("--model", model_path)->required();
  sc->add_option("--data", data_dir)->required();
  sc->add_option("--method", method_name)->required();
  sc->add_option("--layer", layer)->required();
  sc->add_option("--side", side, "in|out");
  sc->add_option("--seed", seed);
  sc->add_option("--limit", limit, "use only the first N images");
  sc->add_option("--out", out)->required();

  auto* ids = app.add_subcommand("identity-study", "virtual identity versus real conv NormGrad");
  std::string conv_layers = "conv2,conv3";
  ids->add_option("--model", model_path)->required();
  ids->add_option("--data", data_dir)->required();
  ids->add_option("--layers", conv_layers);
  ids->add_option("--tol", tol);
  ids->add_option("--limit", limit, "use only the first N images");
  ids->add_option("--out", out)->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  std::size_t gc_nets = 1;
  gc->add_option("--seed", seed);
  gc->add_option("--count", gc_nets, "number of consecutive seeds");
  gc->add_option("--out", out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cout << "error usage\n";
    std::cerr << e.what() << '\n';
    return 1;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    std::ostringstream summary;
    if (cmd == "train-toy") {
      const TrainResult r = train_reference(toy);
      save_model(r.model, train_out);
      auto loss = open_out(sibling(train_out, ".loss.csv"));
      loss << "schema,epoch,loss\n";
      for (std::size_t e = 0; e < r.loss_curve.size(); ++e) {
        loss << "saliency-loss/1," << e + 1 << ',' << format_double(r.loss_curve[e]) << '\n';
      }
      const ShapesDataset data = generate_shapes(toy.images, toy.num_classes, toy.seed);
      summary << "train_accuracy " << format_double(accuracy(r.model, data)) << '\n';
    } else if (cmd == "gen-data") {
      export_dataset(generate_shapes(gen_n, gen_classes, gen_seed), gen_out);
      summary << "images " << gen_n << '\n';
    } else if (cmd == "saliency") {
      const ModelGraph model = open_model(model_path);
      const Tensor img = open_image(image_path, model);
      const Method method = parse_method(method_name);
      const AttachPoint at = attach_from(layer, side);
      const auto meta = meta_from(meta_eps, meta_dir);
      SaliencyMap map = meta ? meta_saliency(model, img, cls, method, at, *meta)
                             : method_saliency(model, img, cls, method, at);
      emit_map(out, map);
      summary << "map " << map.height << 'x' << map.width << '\n';
    } else if (cmd == "combine") {
      const ModelGraph model = open_model(model_path);
      const Tensor img = open_image(image_path, model);
      const Method method = parse_method(method_name);
      const WeightScheme scheme = parse_weight_scheme(scheme_name);
      const CombineMode mode = parse_combine_mode(mode_name);
      const auto layers = parse_layers(layers_arg);
      LayerWeights w;
      if (scheme == WeightScheme::FeatureSpread || scheme == WeightScheme::ProbeAccuracy) {
        if (data_dir.empty()) throw UsageError("--scheme " + scheme_name + " needs --data");
        const auto [imgs, labels] = weight_sample(open_data(data_dir, 0), sample);
        w = scheme_weights(scheme, model, imgs, labels, layers);
      } else {
        w = scheme_weights(scheme, model, {}, {}, layers);
      }
      check_class(model, cls);
      const CombinedMap cm = combined_saliency(model, img, cls, method, w, mode);
      emit_map(out, cm.map);
      write_weights(sibling(out, ".weights.csv"), w);
      for (const auto& [l, g] : w.gamma) summary << "gamma " << l << ' ' << format_double(g) << '\n';
    } else if (cmd == "class-sensitivity") {
      const ModelGraph model = open_model(model_path);
      const ShapesDataset ds = open_data(data_dir, limit);
      std::vector<std::string> names;
      for (const auto& a : ds.annotations) names.push_back(a.image_id);
      EvalReport rep = class_sensitivity(model, ds.images, names, parse_method(method_name),
                                         attach_from(layer, side), meta_from(meta_eps, meta_dir));
      for (auto& r : rep.records) r.tag = layer;
      write_report(out, {rep});
      summary << "mean_spearman " << format_double(rep.mean) << '\n';
    } else if (cmd == "pointing-game") {
      const ShapesDataset ds = open_data(data_dir, limit);
      std::vector<EvalReport> reports;
      if (method_name == "oracle") {
        std::vector<std::pair<SaliencyMap, Annotation>> items;
        for (std::size_t i = 0; i < ds.size(); ++i) {
          items.emplace_back(oracle_map(ds.annotations[i], ds.images[i].dim(1),
                                        ds.images[i].dim(2)),
                             ds.annotations[i]);
        }
        reports.push_back(pointing_game(items, tol));
      } else {
        if (model_path.empty()) throw UsageError("--model is required unless --method oracle");
        const ModelGraph model = open_model(model_path);
        const Method method = parse_method(method_name);
        const auto layers = parse_layers(layers_arg);
        if (!combine_arg.empty()) {
          const auto parts = split(combine_arg, ',');
          if (parts.size() != 2) throw UsageError("--combine expects scheme,mode");
          const WeightScheme scheme = parse_weight_scheme(parts[0]);
          const CombineMode mode = parse_combine_mode(parts[1]);
          const auto [imgs, labels] = weight_sample(ds, sample);
          const LayerWeights w = scheme_weights(scheme, model, imgs, labels, layers);
          std::vector<std::pair<SaliencyMap, Annotation>> items;
          for (std::size_t i = 0; i < ds.size(); ++i) {
            SaliencyMap m = combined_saliency(model, ds.images[i], ds.labels[i], method, w, mode).map;
            m.layer = {parts[0] + "+" + parts[1], Side::Output};
            items.emplace_back(std::move(m), ds.annotations[i]);
          }
          reports.push_back(pointing_game(items, tol));
        } else {
          std::vector<std::vector<std::pair<SaliencyMap, Annotation>>> items(layers.size());
          for (std::size_t i = 0; i < ds.size(); ++i) {
            auto maps = layer_maps(model, ds.images[i], ds.labels[i], method, layers, false);
            for (std::size_t j = 0; j < layers.size(); ++j) {
              items[j].emplace_back(to_input_resolution(maps[j], ds.images[i]), ds.annotations[i]);
            }
          }
          for (const auto& it : items) reports.push_back(pointing_game(it, tol));
        }
      }
      write_report(out, reports);
      for (const auto& r : reports) {
        summary << "accuracy " << (r.records.empty() ? "" : r.records.front().tag) << ' '
                << format_double(r.score) << '\n';
      }
    } else if (cmd == "sanity-check") {
      const ModelGraph model = open_model(model_path);
      const ShapesDataset ds = open_data(data_dir, limit);
      const EvalReport rep = cascading_sweep(
          model, ds, method_fn(parse_method(method_name), attach_from(layer, side)), seed);
      std::vector<EvalReport> per_step;
      for (const auto& name : cascade_order(model)) {
        EvalReport r;
        r.metric = rep.metric;
        for (const auto& rec : rep.records) {
          if (rec.tag == name) r.records.push_back(rec);
        }
        r.summarize();
        summary << "mean_spearman " << name << ' ' << format_double(r.mean) << '\n';
        per_step.push_back(std::move(r));
      }
      write_report(out, per_step);
    } else if (cmd == "identity-study") {
      const ModelGraph model = open_model(model_path);
      const ShapesDataset ds = open_data(data_dir, limit);
      const IdentityStudy study = identity_trick_study(model, ds, split(conv_layers, ','), tol);
      auto rep = open_out(out);
      rep << "schema,layer,kernel,mean_spearman,pointing_identity,pointing_real,pointing_diff\n";
      for (const auto& s : study.layers) {
        rep << "saliency-identity/1," << s.layer << ',' << s.kernel << ','
            << format_double(s.mean_rho) << ',' << format_double(s.pointing_identity) << ','
            << format_double(s.pointing_real) << ',' << format_double(s.pointing_diff()) << '\n';
        summary << "mean_spearman " << s.layer << ' ' << format_double(s.mean_rho) << '\n';
      }
      write_report(sibling(out, ".records.csv"), {study.correlations});
    } else if (cmd == "gradcheck") {
      constexpr double kBound = 1e-6;
      double worst = 0.0;
      std::vector<std::pair<std::uint64_t, GradCheckReport>> runs;
      for (std::size_t k = 0; k < gc_nets; ++k) {
        runs.emplace_back(seed + k, gradcheck(seed + k));
        worst = std::max(worst, runs.back().second.max_rel_err());
      }
      if (!out.empty()) {
        auto rep = open_out(out);
        rep << "schema,seed,net,layer,param,rel_err\n";
        for (const auto& [s, r] : runs) {
          for (const auto& e : r.entries) {
            rep << "saliency-gradcheck/1," << s << ',' << e.net << ',' << e.layer << ','
                << e.param << ',' << format_double(e.rel_err) << '\n';
          }
        }
      }
      if (!(worst < kBound)) {
        throw VerificationFailure("max_rel_err " + format_double(worst) + " >= 1e-6");
      }
      summary << "max_rel_err " << format_double(worst) << " < 1e-6\n";
    }
    std::cout << "ok " << cmd << '\n' << summary.str();
    return 0;
  } catch (const VerificationFailure& e) {
    std::cout << "error verification_failed\n";
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cout << "error usage\n";
    std::cerr << e.what() << '\n';
    return 1;
  } catch (const ModelIoError& e) {
    std::cout << "error model_" << to_string(e.code()) << '\n';
    std::cerr << e.what() << '\n';
    return 1;
  } catch (const GenerationError& e) {
    std::cout << "error generation\n";
    std::cerr << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cout << "error invalid_argument\n";
    std::cerr << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cout << "error runtime\n";
    std::cerr << e.what() << '\n';
    return 1;
  }
}
