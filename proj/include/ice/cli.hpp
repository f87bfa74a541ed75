#ifndef ICE_CLI_HPP
#define ICE_CLI_HPP

// The `ice` command line: fit, sweep, explain, prototypes.
// stdout carries one JSON summary line; diagnostics go to stderr.
// Exit codes: 0 success, 1 validation or input error, 2 internal error.

#include "ice/ice.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace ice::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 1;
inline constexpr int kExitInternal = 2;

struct RunConfig {
  // shared
  std::string config;
  std::string acts;
  std::string head;
  std::string out;
  std::string layout = "nchw";
  std::string klass;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  bool allow_negative = false;
  // fit
  std::string method = "nmf";
  int cprime = 10;
  int max_iterations = 200;
  double tolerance = 1e-4;
  std::string init = "random-uniform";
  std::string layer;
  // sweep
  std::string eval_acts;
  std::string methods = "nmf,pca,kmeans";
  std::string cprime_list = "5:50:5";
  int top_candidates = 5;
  std::string format;
  bool no_timing = false;
  // explain / prototypes
  std::string explainer;
  std::string image;
  std::string manifest;
  std::string dataset_acts;
  int prototypes = 5;
  double threshold = 0.5;
  std::size_t index = 0;
};

namespace cli_detail {

inline void log(std::ostream& err, const std::string& msg) { err << "[ice] " << msg << "\n"; }

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// "5,10,20" or "start:stop:step" (inclusive).
inline std::vector<Eigen::Index> parse_cprime_list(const std::string& s) {
  std::vector<Eigen::Index> out;
  const auto parts = split(s, ':');
  try {
    if (parts.size() == 3 && s.find(',') == std::string::npos) {
      const long a = std::stol(parts[0]), b = std::stol(parts[1]), step = std::stol(parts[2]);
      if (step <= 0 || a < 1 || b < a) throw ValidationError("bad c' range '" + s + "'");
      for (long c = a; c <= b; c += step) out.push_back(c);
    } else {
      for (const auto& p : split(s, ',')) {
        std::size_t used = 0;
        const long v = std::stol(p, &used);
        if (used != p.size() || v < 1) throw ValidationError("bad c' value '" + p + "'");
        out.push_back(v);
      }
    }
  } catch (const std::logic_error&) {
    throw ValidationError("cannot parse c' list '" + s + "'");
  }
  if (out.empty()) throw ValidationError("empty c' list");
  return out;
}

inline FeatureMapBatch load_acts(const Archive& a, const RunConfig& cfg) {
  const Tensor& t = a.tensor("acts");
  if (cfg.layout == "nchw") return to_channel_last(t, !cfg.allow_negative);
  if (cfg.layout == "nhwc") return FeatureMapBatch(t, !cfg.allow_negative);
  throw ValidationError("unknown layout '" + cfg.layout + "' (expected nchw or nhwc)");
}

inline std::vector<Eigen::Index> labels_of(const Archive& a, const std::string& member = "labels") {
  std::vector<Eigen::Index> out;
  for (double v : a.tensor(member).data()) {
    if (v < 0 || v != std::floor(v)) throw ValidationError("labels must be non-negative integers");
    out.push_back(static_cast<Eigen::Index>(v));
  }
  return out;
}

inline std::vector<std::size_t> images_with_label(const std::vector<Eigen::Index>& labels, Eigen::Index cls) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == cls) out.push_back(i);
  }
  return out;
}

inline FitOptions fit_options(const RunConfig& cfg) {
  FitOptions o;
  o.max_iterations = cfg.max_iterations;
  o.tolerance = cfg.tolerance;
  o.seed = cfg.seed;
  o.nmf_init = parse_nmf_init(cfg.init);
  o.validate();
  return o;
}

inline std::vector<std::filesystem::path> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("manifest '" + path + "' is not valid JSON: " + e.what());
  }
  const json& list = j.is_object() ? j.at("images") : j;
  if (!list.is_array()) throw ValidationError("manifest must be a list of images");
  const auto base = std::filesystem::path(path).parent_path();
  std::vector<std::filesystem::path> out;
  for (const auto& item : list) {
    std::filesystem::path p = item.is_string() ? item.get<std::string>() : item.at("path").get<std::string>();
    out.push_back(p.is_absolute() ? p : base / p);
  }
  return out;
}

// ------------------------------------------------------------ commands

inline json cmd_fit(const RunConfig& cfg, std::ostream& err) {
  detail::require(!cfg.acts.empty() && !cfg.head.empty() && !cfg.out.empty(), "fit needs --acts, --head and --out");
  const Archive acts_archive = load_archive(cfg.acts);
  const ClassifierHead head = load_head(load_archive(cfg.head));
  FeatureMapBatch acts = load_acts(acts_archive, cfg);
  TrainedOn trained;
  if (!cfg.klass.empty()) {
    trained.class_index = head.resolve_class(cfg.klass);
    if (acts_archive.has("labels")) {
      const auto picked = images_with_label(labels_of(acts_archive), trained.class_index);
      if (picked.empty()) throw ValidationError("no training images carry class '" + cfg.klass + "'");
      acts = acts.select(picked);
    }
  }
  const Method method = parse_method(cfg.method);
  const FitOptions opts = fit_options(cfg);
  log(err, "fitting " + cfg.method + " with c'=" + std::to_string(cfg.cprime) + " on " + std::to_string(acts.n()) +
               " images");
  const auto start = std::chrono::steady_clock::now();
  const Explainer e = fit_explainer(acts, head, cfg.cprime, method, opts, trained, cfg.layer);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  save_explainer(e, cfg.out);

  json summary{{"command", "fit"}, {"out", cfg.out}, {"method", cfg.method}, {"cprime", cfg.cprime},
               {"images", acts.n()}, {"seconds", seconds},
               {"reconstruction_error", reconstruction_error(flatten_channels(acts), e.reducer)}};
  if (const auto* m = std::get_if<NmfModel>(&e.reducer)) {
    summary["objective"] = m->final_objective;
    summary["iterations"] = m->iterations;
  } else if (const auto* km = std::get_if<KMeansModel>(&e.reducer)) {
    summary["objective"] = std::sqrt(km->inertia);
    summary["iterations"] = km->iterations;
  } else {
    summary["objective"] = reconstruction_error(flatten_channels(acts), e.reducer);
    summary["iterations"] = 1;
  }
  return summary;
}

inline json cmd_sweep(const RunConfig& cfg, std::ostream& err) {
  detail::require(!cfg.acts.empty() && !cfg.eval_acts.empty() && !cfg.head.empty() && !cfg.out.empty(),
                  "sweep needs --acts, --eval-acts, --head and --out");
  detail::require(cfg.top_candidates >= 0, "--top-candidates must be non-negative (0 disables the restriction)");
  detail::require(cfg.threads >= 1, "--threads must be at least 1");
  std::vector<Method> methods;
  for (const auto& m : split(cfg.methods, ',')) methods.push_back(parse_method(m));
  detail::require(!methods.empty(), "empty --methods list");
  const auto c_values = parse_cprime_list(cfg.cprime_list);

  const Archive train_archive = load_archive(cfg.acts);
  const Archive eval_archive = load_archive(cfg.eval_acts);
  eval_archive.require({"acts", "logits"});
  const ClassifierHead head = load_head(load_archive(cfg.head));
  const FeatureMapBatch train = load_acts(train_archive, cfg);
  const FeatureMapBatch eval_acts = load_acts(eval_archive, cfg);
  const Matrix logits = eval_archive.tensor("logits").to_matrix();
  const bool eval_labelled = eval_archive.has("labels");
  const auto eval_labels = eval_labelled ? labels_of(eval_archive) : std::vector<Eigen::Index>{};

  std::vector<ClassSweep> tasks;
  auto eval_for = [&](Eigen::Index cls, bool filter) {
    std::vector<std::size_t> picked;
    if (filter && eval_labelled) {
      picked = images_with_label(eval_labels, cls);
    } else {
      picked.resize(eval_acts.n());
      std::iota(picked.begin(), picked.end(), std::size_t{0});
    }
    if (picked.empty()) throw ValidationError("no eval images for class " + std::to_string(cls));
    Matrix rows(static_cast<Eigen::Index>(picked.size()), logits.cols());
    std::vector<Eigen::Index> truth;
    for (std::size_t i = 0; i < picked.size(); ++i) {
      rows.row(static_cast<Eigen::Index>(i)) = logits.row(static_cast<Eigen::Index>(picked[i]));
      truth.push_back(eval_labelled ? eval_labels[picked[i]] : cls);
    }
    return EvalBatch{eval_acts.select(picked), rows, truth};
  };

  if (train_archive.has("labels")) {
    const auto train_labels = labels_of(train_archive);
    std::set<Eigen::Index> classes(train_labels.begin(), train_labels.end());
    if (!cfg.klass.empty()) classes = {head.resolve_class(cfg.klass)};
    for (auto cls : classes) {
      const auto picked = images_with_label(train_labels, cls);
      if (picked.empty()) throw ValidationError("no training images for class " + std::to_string(cls));
      tasks.push_back({cls, train.select(picked), eval_for(cls, true)});
    }
  } else {
    Eigen::Index cls = -1;
    if (!cfg.klass.empty()) cls = head.resolve_class(cfg.klass);
    if (!eval_labelled && cls < 0) throw ValidationError("eval archive has no labels; pass --class");
    tasks.push_back({cls, train, eval_for(cls, false)});
  }

  SweepOptions opts;
  opts.fit = fit_options(cfg);
  opts.top_candidates = cfg.top_candidates > 0 ? std::optional<Eigen::Index>(cfg.top_candidates) : std::nullopt;
  opts.record_timing = !cfg.no_timing;
  opts.threads = cfg.threads;
  log(err, "sweeping " + std::to_string(tasks.size()) + " class(es) x " + std::to_string(methods.size()) +
               " method(s) x " + std::to_string(c_values.size()) + " concept count(s)");
  const FidelityReport report = sweep(tasks, head, methods, c_values, opts);

  std::error_code ec;
  std::filesystem::create_directories(cfg.out, ec);
  if (!std::filesystem::is_directory(cfg.out)) throw IoError("cannot create output directory '" + cfg.out + "'");
  json outputs = json::array();
  if (cfg.format.empty() || cfg.format == "json") {
    const auto p = std::filesystem::path(cfg.out) / "report.json";
    write_report(report, p, ReportFormat::json);
    outputs.push_back(p.string());
  }
  if (cfg.format.empty() || cfg.format == "csv") {
    const auto p = std::filesystem::path(cfg.out) / "report.csv";
    write_report(report, p, ReportFormat::csv);
    outputs.push_back(p.string());
  }
  if (!cfg.format.empty() && cfg.format != "json" && cfg.format != "csv") {
    throw ValidationError("unknown --format '" + cfg.format + "'");
  }
  return json{{"command", "sweep"}, {"cells", report.cells.size()}, {"classes", tasks.size()}, {"outputs", outputs}};
}

inline json cmd_explain(const RunConfig& cfg, std::ostream& err) {
  detail::require(!cfg.explainer.empty() && !cfg.acts.empty() && !cfg.image.empty() && !cfg.out.empty(),
                  "explain needs --explainer, --acts, --image and --out");
  const Explainer e = load_explainer(cfg.explainer);
  const FeatureMapBatch all = load_acts(load_archive(cfg.acts), cfg);
  detail::require(cfg.index < all.n(), "--index out of range");
  const FeatureMapBatch one = all.slice(cfg.index, 1);
  Eigen::Index k = 0;
  if (cfg.klass.empty()) {
    k = argmax(e.head.apply(gap(one)).row(0));
  } else {
    k = e.head.resolve_class(cfg.klass);
  }
  const LocalExplanation local = explain_local(e, one, k);
  const RgbImage img = read_png(cfg.image);

  std::vector<ConceptAssets> assets;
  if (!cfg.dataset_acts.empty()) {
    detail::require(!cfg.manifest.empty(), "--dataset-acts needs --manifest");
    const FeatureMapBatch dataset = load_acts(load_archive(cfg.dataset_acts), cfg);
    assets = prototype_assets(e, dataset, read_manifest(cfg.manifest), static_cast<std::size_t>(cfg.prototypes),
                              cfg.threshold);
  } else {
    assets.resize(static_cast<std::size_t>(e.concepts()));
    for (Eigen::Index j = 0; j < e.concepts(); ++j) assets[static_cast<std::size_t>(j)].prototypes.concept_index = j;
  }
  for (Eigen::Index j = 0; j < e.concepts(); ++j) {
    assets[static_cast<std::size_t>(j)].instance_overlay = highlight(img, concept_map(e, one, 0, j), j, 0, cfg.threshold);
  }
  const std::string class_name = e.head.class_names[static_cast<std::size_t>(k)];
  const auto files = render_explanation(local, assets, cfg.out, class_name);
  log(err, "wrote " + std::to_string(files.size()) + " files to " + cfg.out);
  return json{{"command", "explain"},          {"class", k},
              {"class_name", class_name},      {"exact_score", local.exact_score},
              {"approx_score", local.approx_score}, {"residual", local.residual_term},
              {"bias", local.bias_term},       {"files", files.size()},
              {"explanation", (std::filesystem::path(cfg.out) / kExplanationFile).string()}};
}

inline json cmd_prototypes(const RunConfig& cfg, std::ostream& err) {
  detail::require(!cfg.explainer.empty() && !cfg.acts.empty() && !cfg.manifest.empty() && !cfg.out.empty(),
                  "prototypes needs --explainer, --acts, --manifest and --out");
  const Explainer e = load_explainer(cfg.explainer);
  const FeatureMapBatch dataset = load_acts(load_archive(cfg.acts), cfg);
  const auto images = read_manifest(cfg.manifest);
  const auto assets =
      prototype_assets(e, dataset, images, static_cast<std::size_t>(std::max(cfg.prototypes, 0)), cfg.threshold);

  std::error_code ec;
  std::filesystem::create_directories(cfg.out, ec);
  if (!std::filesystem::is_directory(cfg.out)) throw IoError("cannot create output directory '" + cfg.out + "'");
  json concepts = json::array();
  std::size_t files = 0;
  for (std::size_t j = 0; j < assets.size(); ++j) {
    json names = json::array(), sources = json::array();
    for (std::size_t r = 0; r < assets[j].prototype_overlays.size(); ++r) {
      const auto name = prototype_file(static_cast<Eigen::Index>(j), r);
      write_png(assets[j].prototype_overlays[r], std::filesystem::path(cfg.out) / name);
      names.push_back(name);
      sources.push_back(images[assets[j].prototypes.image_indices[r]].string());
      ++files;
    }
    concepts.push_back({{"index", j},
                        {"image_indices", assets[j].prototypes.image_indices},
                        {"scores", assets[j].prototypes.scores},
                        {"source_images", sources},
                        {"files", names}});
  }
  const std::string text = json{{"concepts", concepts}}.dump(2) + "\n";
  write_file_bytes(std::filesystem::path(cfg.out) / "prototypes.json",
                   std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
  log(err, "wrote " + std::to_string(files) + " prototype overlays to " + cfg.out);
  return json{{"command", "prototypes"}, {"concepts", assets.size()}, {"files", files},
              {"index", (std::filesystem::path(cfg.out) / "prototypes.json").string()}};
}

/// Expand a JSON config into flags placed ahead of the explicit ones, skipping
/// any flag the command line already sets.
inline std::vector<std::string> merge_config(const std::vector<std::string>& args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty() || args.size() < 2) return args;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  json cfg;
  try {
    cfg = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("config '" + path + "' is not valid JSON: " + e.what());
  }
  if (!cfg.is_object()) throw ValidationError("config must be a JSON object");
  json flat = json::object();
  for (auto& [k, v] : cfg.items()) {
    if (!v.is_object()) flat[k] = v;
  }
  const std::string& sub = args[1];
  if (cfg.contains(sub) && cfg[sub].is_object()) {
    for (auto& [k, v] : cfg[sub].items()) flat[k] = v;
  }
  auto given = [&](const std::string& flag) {
    for (const auto& a : args) {
      if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    }
    return false;
  };
  std::vector<std::string> out{args[0], sub};
  for (auto& [k, v] : flat.items()) {
    const std::string flag = "--" + k;
    if (given(flag)) continue;
    if (v.is_boolean()) {
      if (v.get<bool>()) out.push_back(flag);
    } else if (v.is_array()) {
      std::string joined;
      for (const auto& x : v) joined += (joined.empty() ? "" : ",") + (x.is_string() ? x.get<std::string>() : x.dump());
      out.push_back(flag);
      out.push_back(joined);
    } else {
      out.push_back(flag);
      out.push_back(v.is_string() ? v.get<std::string>() : v.dump());
    }
  }
  out.insert(out.end(), args.begin() + 2, args.end());
  return out;
}

}  // namespace cli_detail

/// Entry point shared by the binary and the tests.
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  using namespace cli_detail;
  RunConfig cfg;
  CLI::App app{"Concept-based explanations for CNN feature maps"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "ice 1.0");

  auto shared = [&](CLI::App* sub) {
    sub->add_option("--config", cfg.config, "JSON file with default flag values (flags win)");
    sub->add_option("--seed", cfg.seed, "Random seed");
    sub->add_option("--threads", cfg.threads, "Worker thread cap");
    sub->add_option("--layout", cfg.layout, "Layout of acts tensors: nchw (default) or nhwc");
    sub->add_flag("--allow-negative", cfg.allow_negative, "Accept negative activations");
    sub->add_option("--out", cfg.out, "Output path");
  };
  auto solver = [&](CLI::App* sub) {
    sub->add_option("--max-iterations", cfg.max_iterations, "Solver iteration cap");
    sub->add_option("--tolerance", cfg.tolerance, "Relative objective change that stops NMF");
    sub->add_option("--init", cfg.init, "NMF init: random-uniform, nndsvd, from-kmeans, identity");
  };

  auto* fit = app.add_subcommand("fit", "Fit an explainer on one class's feature maps");
  shared(fit);
  solver(fit);
  fit->add_option("--acts", cfg.acts, "Archive with an `acts` member")->required();
  fit->add_option("--head", cfg.head, "Archive with W and b")->required();
  fit->add_option("--method", cfg.method, "nmf, pca or kmeans");
  fit->add_option("--cprime", cfg.cprime, "Number of concepts");
  fit->add_option("--class", cfg.klass, "Class the explainer describes (name or index)");
  fit->add_option("--layer", cfg.layer, "Layer name recorded in the explainer");

  auto* sw = app.add_subcommand("sweep", "Fidelity sweep over methods and concept counts");
  shared(sw);
  solver(sw);
  sw->add_option("--acts", cfg.acts, "Training archive with `acts` (optional `labels`)")->required();
  sw->add_option("--eval-acts", cfg.eval_acts, "Eval archive with `acts`, `logits` (optional `labels`)")->required();
  sw->add_option("--head", cfg.head, "Archive with W and b")->required();
  sw->add_option("--methods,--method", cfg.methods, "Comma-separated methods");
  sw->add_option("--cprime-list,--cprime", cfg.cprime_list, "c' values: a,b,c or start:stop:step");
  sw->add_option("--top-candidates", cfg.top_candidates, "Top-t restriction for Fid_c (0 = none)");
  sw->add_option("--class", cfg.klass, "Restrict to one class");
  sw->add_option("--format", cfg.format, "json or csv (default: both)");
  sw->add_flag("--no-timing", cfg.no_timing, "Record fit_seconds as 0");

  auto* ex = app.add_subcommand("explain", "Explain one image's class score");
  shared(ex);
  ex->add_option("--explainer", cfg.explainer, "Explainer archive")->required();
  ex->add_option("--acts", cfg.acts, "Archive with the image's `acts`")->required();
  ex->add_option("--index", cfg.index, "Image index inside --acts");
  ex->add_option("--image", cfg.image, "PNG of the explained image")->required();
  ex->add_option("--class", cfg.klass, "Class to explain (default: predicted)");
  ex->add_option("--threshold", cfg.threshold, "Heatmap threshold");
  ex->add_option("--dataset-acts", cfg.dataset_acts, "Archive of prototype candidates");
  ex->add_option("--manifest", cfg.manifest, "Image list matching --dataset-acts");
  ex->add_option("--prototypes", cfg.prototypes, "Prototypes per concept");

  auto* pr = app.add_subcommand("prototypes", "Prototype overlays for every concept");
  shared(pr);
  pr->add_option("--explainer", cfg.explainer, "Explainer archive")->required();
  pr->add_option("--acts", cfg.acts, "Archive of the dataset's `acts`")->required();
  pr->add_option("--manifest", cfg.manifest, "Image list matching --acts")->required();
  pr->add_option("--prototypes", cfg.prototypes, "Prototypes per concept");
  pr->add_option("--threshold", cfg.threshold, "Heatmap threshold");

  try {
    args = merge_config(args);
    std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  }

  try {
    if (!(cfg.threshold >= 0.0 && cfg.threshold <= 1.0)) throw ValidationError("--threshold must lie in [0, 1]");
    json summary;
    if (*fit) summary = cmd_fit(cfg, err);
    else if (*sw) summary = cmd_sweep(cfg, err);
    else if (*ex) summary = cmd_explain(cfg, err);
    else summary = cmd_prototypes(cfg, err);
    out << summary.dump() << "\n";
    return kExitOk;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const json::exception& e) {
    err << "error: malformed JSON input: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace ice::cli

#endif  // ICE_CLI_HPP
