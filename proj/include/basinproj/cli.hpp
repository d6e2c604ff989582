#pragma once

// Command-line harness: projection, benchmarks, transform recovery, blending.
// Every command writes under --out and leaves a config echo next to its CSVs.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "basinproj/blend.hpp"
#include "basinproj/core.hpp"
#include "basinproj/image_io.hpp"
#include "basinproj/losses.hpp"
#include "basinproj/project.hpp"
#include "basinproj/toygen.hpp"
#include "basinproj/transforms.hpp"

namespace basinproj {

inline constexpr int kExitOk = 0;
inline constexpr int kExitNumeric = 1;
inline constexpr int kExitUsage = 2;

// ---------------------------------------------------------------------------
// Experiment configuration

/// Flat key=value settings. Every key has a default and a provenance label;
/// unknown keys are rejected.
class ExperimentConfig {
 public:
  struct Entry {
    std::string value;
    std::string fallback;
    std::string provenance;  // "paper" or "artifact"
    std::string help;
    bool overridden = false;
  };

  ExperimentConfig() {
    def("seed", "0", "artifact", "master seed for targets and optimizers");
    def("model", "", "artifact", "generator file; empty builds one from model_seed");
    def("model_seed", "7", "artifact", "seed of the built-in toy generator");
    def("trials", "10", "artifact", "trials per variant");
    def("variants", "adam,cma_adam,basincma", "paper", "comma list; suffix +transform enables stage 1");
    def("target", "synthetic", "artifact", "synthetic or an image path");
    def("mask", "", "artifact", "mask image path; empty uses the box");
    def("box", "8,8,16,16", "artifact", "foreground box y0,x0,h,w");
    def("mask_bg", "0.3", "artifact", "background mask weight");
    def("shift_max_px", "0", "artifact", "synthetic targets: max |shift| per axis in pixels");
    def("class", "-1", "artifact", "class index; -1 chooses by exhaustive evaluation");
    def("success_threshold", "0.01", "artifact", "benchmark success: final masked loss below this");
    def("equal_budget", "false", "artifact", "match generator forward calls across variants");
    def("budget", "0", "artifact", "forward-call budget; 0 uses the basincma schedule");
    def("n_transform_iters", "30", "paper", "stage 1 CMA generations (n)");
    def("m_inner_grad", "30", "paper", "stage 1 ADAM steps per candidate (m)");
    def("p_latent_iters", "30", "paper", "stage 2 CMA generations (p)");
    def("q_inner_grad", "30", "paper", "stage 2 ADAM steps per candidate (q)");
    def("final_grad_steps", "300", "paper", "ADAM steps in the last stage 2 generation");
    def("population", "18", "paper", "CMA population / number of seeds (N)");
    def("beta", "10", "paper", "perceptual weight");
    def("c_max", "2", "paper", "latent clamp bound");
    def("lr_z", "0.05", "paper", "ADAM learning rate for z");
    def("lr_c", "0.0001", "paper", "ADAM learning rate for c");
    def("warm_restart_variance", "0.5", "paper", "stage 1 latent restart variance");
    def("adam_steps", "500", "paper", "ADAM baseline steps");
    def("cma_iters", "300", "artifact", "CMA baseline generations");
    def("cma_adam_cma_iters", "100", "artifact", "CMA generations before ADAM in cma_adam");
    def("cma_adam_grad_steps", "500", "paper", "ADAM steps after CMA in cma_adam");
    def("transform_cov", "0.1", "artifact", "stage 1 initial covariance scale");
    def("search_scale", "true", "artifact", "stage 1 searches scale");
    def("search_translation", "true", "artifact", "stage 1 searches translation");
    def("search_brightness", "true", "artifact", "stage 1 searches brightness");
    def("stats_samples", "500", "artifact", "samples for model statistics");
    def("shift_grid", "-8,-4,0,4,8", "artifact", "recover-transform: x shifts in pixels");
    def("scale_grid", "1", "artifact", "recover-transform: applied scales");
  }

  /// Parses "key = value" lines; '#' starts a comment.
  static ExperimentConfig parse(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    std::size_t offset = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::size_t here = offset;
      offset += line.size() + 1;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ParseError("config line " + std::to_string(lineno) + ": expected key = value", here);
      try {
        cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
      } catch (const DomainError& e) {
        throw ParseError("config line " + std::to_string(lineno) + ": " + e.what(), here);
      }
    }
    return cfg;
  }

  static ExperimentConfig load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DomainError("cannot open config: " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  void set(const std::string& key, const std::string& value) {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw DomainError("unknown config key '" + key + "'");
    it->second.value = value;
    it->second.overridden = true;
  }

  /// "key=value" form used by --set.
  void set_assignment(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw DomainError("expected key=value, got '" + kv + "'");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  const Entry& entry(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw DomainError("unknown config key '" + key + "'");
    return it->second;
  }
  const std::string& str(const std::string& key) const { return entry(key).value; }

  long long integer(const std::string& key) const {
    const auto& v = str(key);
    long long out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw DomainError(key + ": expected an integer, got '" + v + "'");
    return out;
  }
  double real(const std::string& key) const {
    const auto& v = str(key);
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw DomainError(key + ": expected a number, got '" + v + "'");
    }
  }
  bool boolean(const std::string& key) const {
    const auto& v = str(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw DomainError(key + ": expected true/false, got '" + v + "'");
  }
  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }
  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : list(key)) {
      try {
        out.push_back(std::stod(s));
      } catch (const std::exception&) {
        throw DomainError(key + ": expected numbers, got '" + s + "'");
      }
    }
    return out;
  }

  /// Echo with every key, its value and where the value came from.
  std::string echo() const {
    std::string out = "# basinproj configuration echo\n";
    for (const auto& [key, e] : entries_) {
      out += key + " = " + e.value + "  # " + (e.overridden ? "set" : "default") + ", " + e.provenance;
      if (e.overridden && e.value != e.fallback) out += ", default " + (e.fallback.empty() ? "\"\"" : e.fallback);
      out += "\n";
    }
    return out;
  }

  ProjectionConfig projection() const {
    ProjectionConfig p;
    p.n_transform_iters = static_cast<int>(integer("n_transform_iters"));
    p.m_inner_grad = static_cast<int>(integer("m_inner_grad"));
    p.p_latent_iters = static_cast<int>(integer("p_latent_iters"));
    p.q_inner_grad = static_cast<int>(integer("q_inner_grad"));
    p.final_grad_steps = static_cast<int>(integer("final_grad_steps"));
    p.population = static_cast<int>(integer("population"));
    p.beta = real("beta");
    p.c_max = real("c_max");
    p.lrs.z = real("lr_z");
    p.lrs.c = real("lr_c");
    p.warm_restart_variance = real("warm_restart_variance");
    p.adam_steps = static_cast<int>(integer("adam_steps"));
    p.cma_iters = static_cast<int>(integer("cma_iters"));
    p.cma_adam_cma_iters = static_cast<int>(integer("cma_adam_cma_iters"));
    p.cma_adam_grad_steps = static_cast<int>(integer("cma_adam_grad_steps"));
    p.transform_cov = real("transform_cov");
    p.search = {boolean("search_scale"), boolean("search_translation"), boolean("search_brightness")};
    if (const auto k = integer("class"); k >= 0) p.class_index = static_cast<int>(k);
    p.validate();
    return p;
  }

  Box box() const {
    const auto v = reals("box");
    if (v.size() != 4) throw DomainError("box: expected y0,x0,h,w");
    return Box{static_cast<int>(v[0]), static_cast<int>(v[1]), static_cast<int>(v[2]), static_cast<int>(v[3])};
  }

  std::vector<Variant> variants() const {
    std::vector<Variant> out;
    for (const auto& name : list("variants")) out.push_back(parse_variant(name));
    if (out.empty()) throw DomainError("variants: empty list");
    return out;
  }

 private:
  void def(const std::string& key, const std::string& value, const std::string& provenance, const std::string& help) {
    entries_[key] = Entry{value, value, provenance, help, false};
  }
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, Entry> entries_;
};

// ---------------------------------------------------------------------------
// Shared helpers

inline GeneratorModel<float> load_model(const ExperimentConfig& cfg) {
  if (!cfg.str("model").empty()) return load_generator(cfg.str("model"));
  return make_generator(static_cast<std::uint64_t>(cfg.integer("model_seed")));
}

struct SyntheticTarget {
  ImageBuffer image;
  MaskBuffer mask;
  LatentState<float> truth;
  int class_index = 0;
  TransformParams applied;  // target = T_applied(G(truth))
};

/// In-range target G(z, c) with z ~ N(0, I) clamped and a random class,
/// optionally moved by T_applied. The box mask moves with it.
inline SyntheticTarget make_synthetic_target(const GeneratorModel<float>& model, const Rng& rng, const Box& box,
                                             float mask_bg, const TransformParams& applied = {},
                                             double c_max = 2.0) {
  Rng r = rng;
  SyntheticTarget t;
  t.truth.z.resize(model.arch.z_dim);
  for (auto& v : t.truth.z) v = static_cast<float>(std::clamp(r.normal(), -c_max, c_max));
  t.class_index = r.integer(0, model.arch.class_count - 1);
  t.truth.c = embed_class(model, t.class_index);
  t.applied = applied;
  const auto moved =
      transform_target(forward(model, t.truth), make_box_mask(model.arch.height, model.arch.width, box, 1.0f, mask_bg),
                       applied);
  t.image = moved.image;
  t.mask = moved.mask;
  return t;
}

/// Translation that moves image content by (dy, dx) pixels.
inline TransformParams shift_params(double dy_px, double dx_px, int height, int width, double scale = 1.0) {
  TransformParams p;
  p.spatial = {scale, scale, -dx_px / (0.5 * width), -dy_px / (0.5 * height)};
  return p;
}

inline nlohmann::json params_to_json(const TransformParams& p) {
  return {{"sx", p.spatial.sx}, {"sy", p.spatial.sy}, {"tx", p.spatial.tx}, {"ty", p.spatial.ty},
          {"gamma", p.color.gamma}};
}

inline nlohmann::json result_to_json(const ProjectionResult& r) {
  nlohmann::json j;
  j["variant"] = to_string(r.variant);
  j["class_index"] = r.class_index;
  j["z"] = r.best.z;
  j["c"] = r.best.c;
  j["phi"] = params_to_json(r.phi);
  j["phi_init"] = params_to_json(r.phi_init);
  j["loss"] = {{"total", r.final_report.total},
               {"l1", r.final_report.l1_term},
               {"perceptual", r.final_report.perceptual_term},
               {"beta", r.final_report.beta}};
  j["forward_calls"] = r.forward_calls;
  j["candidates"] = r.candidates.size();
  for (const auto& t : r.timings) j["seconds"][t.stage] = t.seconds;
  return j;
}

inline CsvWriter traces_csv(const ProjectionResult& r) {
  CsvWriter csv({"candidate", "step", "loss", "frame"});
  for (std::size_t i = 0; i < r.candidates.size(); ++i) {
    const auto& c = r.candidates[i];
    for (std::size_t k = 0; k < c.losses.size(); ++k) csv.row(i, k, c.losses[k], "optimization");
    csv.row(i, c.losses.size(), c.final_loss, "original");
  }
  return csv;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DomainError("cannot write " + path.string());
  f << text;
}

namespace detail {

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out = "out";
};

inline void add_common(CLI::App& app, CommonOptions& o) {
  app.add_option("--config", o.config_path, "key=value config file");
  app.add_option("--set", o.sets, "override a config key (key=value), repeatable");
  app.add_option("--out", o.out, "output directory");
}

inline ExperimentConfig resolve(const CommonOptions& o) {
  ExperimentConfig cfg = o.config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(o.config_path);
  for (const auto& s : o.sets) cfg.set_assignment(s);
  return cfg;
}

inline std::filesystem::path prepare_out(const CommonOptions& o, const ExperimentConfig& cfg) {
  const std::filesystem::path dir = o.out;
  std::filesystem::create_directories(dir);
  write_text(dir / "config.txt", cfg.echo());
  return dir;
}

template <typename Body>
int guarded(std::ostream& err, Body&& body) {
  try {
    return body();
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "failure: " << e.what() << "\n";
    return kExitNumeric;
  }
}

inline int parse_args(CLI::App& app, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }
  return -1;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands. Each takes the arguments after the subcommand name.

inline int cmd_project(const std::vector<std::string>& args, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
  CLI::App app{"Project a target image into the generator", "project"};
  detail::CommonOptions common;
  std::string image, mask, box, variant = "basincma";
  std::uint64_t seed = 0;
  int class_index = -1;
  bool blend = false, tune = false;
  detail::add_common(app, common);
  app.add_option("--image", image, "target image (PNG or PPM)")->required();
  app.add_option("--mask", mask, "mask image");
  app.add_option("--box", box, "foreground box y0,x0,h,w (instead of --mask)");
  app.add_option("--variant", variant, "adam | cma | cma_adam | basincma, optional +transform");
  app.add_option("--seed", seed, "optimizer seed");
  app.add_option("--class", class_index, "class index (default: exhaustive choice)");
  app.add_flag("--blend", blend, "Poisson-blend the projection into the target");
  app.add_flag("--finetune", tune, "fine-tune the generator after projection");
  if (const int rc = detail::parse_args(app, args, out, err); rc >= 0) return rc;

  return detail::guarded(err, [&] {
    ExperimentConfig cfg = detail::resolve(common);
    cfg.set("seed", std::to_string(seed));
    cfg.set("target", image);
    if (!mask.empty()) cfg.set("mask", mask);
    if (!box.empty()) cfg.set("box", box);
    if (class_index >= 0) cfg.set("class", std::to_string(class_index));
    cfg.set("variants", variant);
    const Variant v = parse_variant(variant);
    const auto model = load_model(cfg);
    const ImageBuffer y = read_image(image);
    const MaskBuffer m = mask.empty() ? make_box_mask(y.height(), y.width(), cfg.box(), 1.0f,
                                                      static_cast<float>(cfg.real("mask_bg")))
                                      : read_mask(mask);
    ProjectionConfig pc = cfg.projection();
    if (v.with_transform)
      pc.stats = compute_model_stats(model, Rng(cfg.integer("model_seed")).substream(0x57a75),
                                     static_cast<int>(cfg.integer("stats_samples")));
    const auto dir = detail::prepare_out(common, cfg);

    const auto res = project(model, y, m, pc, Rng(seed), v);
    const ImageBuffer projected = inverse_transform(forward(model, res.best), res.phi);
    write_image(projected, dir / "projection.png");
    nlohmann::json record = result_to_json(res);

    CsvWriter summary({"variant", "seed", "final_loss", "l1", "perceptual", "forward_calls", "sx", "sy", "tx", "ty",
                       "gamma"});
    summary.row(to_string(v), seed, res.final_report.total, res.final_report.l1_term,
                res.final_report.perceptual_term, res.forward_calls, res.phi.spatial.sx, res.phi.spatial.sy,
                res.phi.spatial.tx, res.phi.spatial.ty, res.phi.color.gamma);
    summary.save(dir / "summary.csv");
    traces_csv(res).save(dir / "traces.csv");

    if (tune) {
      const auto ft = finetune(model, y, m, res.best, res.phi);
      write_image(inverse_transform(forward(ft.model, ft.latent), res.phi), dir / "finetuned.png");
      save_generator(ft.model, dir / "finetuned_model.bin");
      CsvWriter trace({"step", "recon_loss"});
      for (std::size_t k = 0; k < ft.trace.size(); ++k) trace.row(k, ft.trace[k]);
      trace.save(dir / "finetune.csv");
      record["finetune"] = {{"steps", ft.steps},
                            {"initial_loss", ft.initial_loss},
                            {"final_loss", ft.final_loss},
                            {"theta_distance", ft.theta_distance},
                            {"reached_threshold", ft.reached_threshold},
                            {"cap_warning", ft.cap_warning},
                            {"monotone_warning", ft.monotone_warning}};
      if (ft.cap_warning) err << "warning: fine-tuning hit the step cap before the threshold\n";
    }
    if (blend) {
      const auto b = poisson_blend({projected, y, region_from_mask(m)});
      write_image(b.image, dir / "blended.png");
      record["blend"] = {{"residual", b.residual}, {"iterations", b.iterations}, {"converged", b.converged}};
      out << "blend residual " << format_number(b.residual) << "\n";
    }
    write_text(dir / "result.json", record.dump(2) + "\n");
    out << to_string(v) << " final loss " << format_number(res.final_report.total) << " ("
        << res.forward_calls << " generator calls)\n";
    return kExitOk;
  });
}

inline int cmd_benchmark(const std::vector<std::string>& args, std::ostream& out = std::cout,
                         std::ostream& err = std::cerr) {
  CLI::App app{"Compare projection variants on matched synthetic targets", "benchmark"};
  detail::CommonOptions common;
  detail::add_common(app, common);
  if (const int rc = detail::parse_args(app, args, out, err); rc >= 0) return rc;

  return detail::guarded(err, [&] {
    const ExperimentConfig cfg = detail::resolve(common);
    if (cfg.str("target") != "synthetic") throw DomainError("benchmark: only synthetic targets are supported");
    const auto model = load_model(cfg);
    const auto variants = cfg.variants();
    const int trials = static_cast<int>(cfg.integer("trials"));
    if (trials < 1) throw DomainError("trials must be >= 1");
    const double threshold = cfg.real("success_threshold");
    const double shift_max = cfg.real("shift_max_px");
    const Rng master(static_cast<std::uint64_t>(cfg.integer("seed")));
    ProjectionConfig base = cfg.projection();
    if (std::any_of(variants.begin(), variants.end(), [](const Variant& v) { return v.with_transform; }))
      base.stats = compute_model_stats(model, Rng(cfg.integer("model_seed")).substream(0x57a75),
                                       static_cast<int>(cfg.integer("stats_samples")));
    const auto dir = detail::prepare_out(common, cfg);

    std::vector<ProjectionConfig> configs;
    for (const auto& v : variants) {
      ProjectionConfig pc = base;
      if (cfg.boolean("equal_budget")) {
        std::uint64_t budget = static_cast<std::uint64_t>(cfg.integer("budget"));
        if (budget == 0)
          budget = expected_forward_calls(base, Variant{Optimizer::basincma, v.with_transform},
                                          model.arch.class_count);
        pc = equalize_budget(base, v, budget, model.arch.class_count);
      }
      configs.push_back(pc);
    }

    std::vector<SyntheticTarget> targets;
    for (int t = 0; t < trials; ++t) {
      Rng r = master.substream(static_cast<std::uint64_t>(t));
      TransformParams applied;
      if (shift_max > 0.0) {
        Rng rs = r.substream(1);
        applied = shift_params(std::round(rs.uniform(-shift_max, shift_max)),
                               std::round(rs.uniform(-shift_max, shift_max)), model.arch.height, model.arch.width);
      }
      targets.push_back(make_synthetic_target(model, r.substream(0), cfg.box(),
                                              static_cast<float>(cfg.real("mask_bg")), applied));
    }

    struct Job {
      std::size_t variant;
      int trial;
    };
    std::vector<Job> jobs;
    for (std::size_t v = 0; v < variants.size(); ++v)
      for (int t = 0; t < trials; ++t) jobs.push_back({v, t});
    std::vector<ProjectionResult> results(jobs.size());
    parallel_for(jobs.size(), [&](std::size_t i) {
      const auto& j = jobs[i];
      results[i] = project(model, targets[j.trial].image, targets[j.trial].mask, configs[j.variant],
                           master.substream(1000 + static_cast<std::uint64_t>(j.trial)), variants[j.variant]);
    });

    CsvWriter rows({"variant", "trial", "final_loss", "l1", "perceptual", "success", "forward_calls", "class_true",
                    "class_used", "tx", "ty", "sx", "gamma"});
    CsvWriter summary({"variant", "trials", "mean_loss", "median_loss", "stderr_loss", "success_rate",
                       "mean_forward_calls"});
    for (std::size_t v = 0; v < variants.size(); ++v) {
      std::vector<double> losses;
      double calls = 0.0;
      int wins = 0;
      for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (jobs[i].variant != v) continue;
        const auto& r = results[i];
        const double l = r.final_report.total;
        losses.push_back(l);
        calls += static_cast<double>(r.forward_calls);
        wins += l < threshold;
        rows.row(to_string(variants[v]), jobs[i].trial, l, r.final_report.l1_term, r.final_report.perceptual_term,
                 static_cast<int>(l < threshold), r.forward_calls, targets[jobs[i].trial].class_index, r.class_index, r.phi.spatial.tx, r.phi.spatial.ty,
                 r.phi.spatial.sx, r.phi.color.gamma);
      }
      const double n = static_cast<double>(losses.size());
      const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / n;
      double var = 0.0;
      for (double l : losses) var += (l - mean) * (l - mean);
      const double se = n > 1 ? std::sqrt(var / (n - 1) / n) : 0.0;
      summary.row(to_string(variants[v]), trials, mean, detail::median(losses), se, wins / n, calls / n);
      out << to_string(variants[v]) << ": median loss " << format_number(detail::median(losses)) << ", success "
          << wins << "/" << trials << ", mean calls " << format_number(calls / n) << "\n";
    }
    rows.save(dir / "benchmark.csv");
    summary.save(dir / "benchmark_summary.csv");
    return kExitOk;
  });
}

inline int cmd_recover_transform(const std::vector<std::string>& args, std::ostream& out = std::cout,
                                 std::ostream& err = std::cerr) {
  CLI::App app{"Apply known transforms to in-range targets and recover them with stage 1", "recover-transform"};
  detail::CommonOptions common;
  detail::add_common(app, common);
  if (const int rc = detail::parse_args(app, args, out, err); rc >= 0) return rc;

  return detail::guarded(err, [&] {
    const ExperimentConfig cfg = detail::resolve(common);
    const auto model = load_model(cfg);
    const auto shifts = cfg.reals("shift_grid");
    const auto scales = cfg.reals("scale_grid");
    if (shifts.empty() || scales.empty()) throw DomainError("recover-transform: empty grid");
    const int trials = static_cast<int>(cfg.integer("trials"));
    const Rng master(static_cast<std::uint64_t>(cfg.integer("seed")));
    ProjectionConfig pc = cfg.projection();
    pc.stats = compute_model_stats(model, Rng(cfg.integer("model_seed")).substream(0x57a75),
                                   static_cast<int>(cfg.integer("stats_samples")));
    const auto dir = detail::prepare_out(common, cfg);

    struct Job {
      double shift, scale;
      int trial;
    };
    std::vector<Job> jobs;
    for (double s : scales)
      for (double dx : shifts)
        for (int t = 0; t < trials; ++t) jobs.push_back({dx, s, t});
    std::vector<std::pair<TransformParams, TransformParams>> found(jobs.size());
    parallel_for(jobs.size(), [&](std::size_t i) {
      const auto& j = jobs[i];
      const auto applied = shift_params(0.0, j.shift, model.arch.height, model.arch.width, j.scale);
      const auto target = make_synthetic_target(model, master.substream(static_cast<std::uint64_t>(j.trial)),
                                                cfg.box(), static_cast<float>(cfg.real("mask_bg")), applied);
      ProjectionConfig local = pc;
      if (!local.class_index) local.class_index = target.class_index;
      ForwardCounter counter;
      const ProjectionContext ctx{model, local, counter};
      const auto c0 = embed_class(model, *local.class_index);
      const auto s1 = stage1_search_transform(ctx, target.image, target.mask, init_transform(target.mask, *pc.stats),
                                              c0, master.substream(5000 + i));
      found[i] = {applied, invert_params(s1.phi)};
    });

    CsvWriter csv({"trial", "applied_sx", "applied_sy", "applied_tx", "applied_ty", "applied_gamma", "recovered_sx",
                   "recovered_sy", "recovered_tx", "recovered_ty", "recovered_gamma", "abs_err_sx", "abs_err_sy",
                   "abs_err_tx", "abs_err_ty", "abs_err_gamma", "shift_error_px"});
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      const auto a = found[i].first.to_array();
      const auto r = found[i].second.to_array();
      std::vector<std::string> row{std::to_string(jobs[i].trial)};
      for (double v : a) row.push_back(format_number(v));
      for (double v : r) row.push_back(format_number(v));
      for (int k = 0; k < 5; ++k) row.push_back(format_number(std::abs(a[k] - r[k])));
      const double ex = std::abs(a[2] - r[2]) * 0.5 * model.arch.width;
      const double ey = std::abs(a[3] - r[3]) * 0.5 * model.arch.height;
      row.push_back(format_number(std::hypot(ex, ey)));
      csv.row(row);
    }
    csv.save(dir / "recover_transform.csv");
    out << "wrote " << jobs.size() << " recovery trials\n";
    return kExitOk;
  });
}

inline int cmd_blend(const std::vector<std::string>& args, std::ostream& out = std::cout,
                     std::ostream& err = std::cerr) {
  CLI::App app{"Poisson-blend a source into a target inside a mask", "blend"};
  detail::CommonOptions common;
  std::string source, target, mask;
  double tol = 1e-5;
  detail::add_common(app, common);
  app.add_option("--source", source, "source image")->required();
  app.add_option("--target", target, "target image")->required();
  app.add_option("--mask", mask, "mask image; its foreground is the blend region")->required();
  app.add_option("--tol", tol, "residual tolerance");
  if (const int rc = detail::parse_args(app, args, out, err); rc >= 0) return rc;

  return detail::guarded(err, [&] {
    const ExperimentConfig cfg = detail::resolve(common);
    const auto s = read_image(source);
    const auto t = read_image(target);
    const auto m = read_mask(mask);
    if (!s.same_shape(t) || m.height() != t.height() || m.width() != t.width())
      throw ShapeError("blend: source, target and mask sizes differ");
    const auto dir = detail::prepare_out(common, cfg);
    BlendOptions opt;
    opt.tol = tol;
    const auto b = poisson_blend({s, t, region_from_mask(m)}, opt);
    write_image(b.image, dir / "blended.png");
    out << "residual " << format_number(b.residual) << " after " << b.iterations << " iterations\n";
    if (!b.converged) {
      err << "blend did not reach tolerance\n";
      return kExitNumeric;
    }
    return kExitOk;
  });
}

inline int cmd_gen_target(const std::vector<std::string>& args, std::ostream& out = std::cout,
                          std::ostream& err = std::cerr) {
  CLI::App app{"Generate an in-range synthetic target, optionally shifted", "gen-target"};
  detail::CommonOptions common;
  std::uint64_t seed = 0;
  double dx = 0.0, dy = 0.0, scale = 1.0, gamma = 0.0;
  detail::add_common(app, common);
  app.add_option("--seed", seed, "target seed");
  app.add_option("--shift-x", dx, "move content right by this many pixels");
  app.add_option("--shift-y", dy, "move content down by this many pixels");
  app.add_option("--scale", scale, "applied scale");
  app.add_option("--gamma", gamma, "applied brightness offset");
  if (const int rc = detail::parse_args(app, args, out, err); rc >= 0) return rc;

  return detail::guarded(err, [&] {
    ExperimentConfig cfg = detail::resolve(common);
    cfg.set("seed", std::to_string(seed));
    const auto model = load_model(cfg);
    auto applied = shift_params(dy, dx, model.arch.height, model.arch.width, scale);
    applied.color.gamma = gamma;
    const auto t = make_synthetic_target(model, Rng(seed), cfg.box(), static_cast<float>(cfg.real("mask_bg")), applied);
    const auto dir = detail::prepare_out(common, cfg);
    write_image(t.image, dir / "target.png");
    write_mask(t.mask, dir / "mask.png");
    nlohmann::json j{{"seed", seed},     {"class_index", t.class_index}, {"z", t.truth.z},
                     {"c", t.truth.c},   {"applied", params_to_json(applied)}};
    write_text(dir / "truth.json", j.dump(2) + "\n");
    out << "class " << t.class_index << "\n";
    return kExitOk;
  });
}

inline int cmd_stats(const std::vector<std::string>& args, std::ostream& out = std::cout,
                     std::ostream& err = std::cerr) {
  CLI::App app{"Object placement statistics of the generator", "stats"};
  detail::CommonOptions common;
  detail::add_common(app, common);
  if (const int rc = detail::parse_args(app, args, out, err); rc >= 0) return rc;

  return detail::guarded(err, [&] {
    const ExperimentConfig cfg = detail::resolve(common);
    const auto model = load_model(cfg);
    const auto st = compute_model_stats(model, Rng(cfg.integer("model_seed")).substream(0x57a75),
                                        static_cast<int>(cfg.integer("stats_samples")));
    const auto dir = detail::prepare_out(common, cfg);
    CsvWriter csv({"center_y", "center_x", "size_h", "size_w", "valid_detections", "samples"});
    csv.row(st.center_y, st.center_x, st.size_h, st.size_w, st.valid_detections, st.samples);
    csv.save(dir / "stats.csv");
    out << csv.str();
    return kExitOk;
  });
}

inline int cmd_init_model(const std::vector<std::string>& args, std::ostream& out = std::cout,
                          std::ostream& err = std::cerr) {
  CLI::App app{"Write the seeded toy generator and the frozen feature weights", "init-model"};
  detail::CommonOptions common;
  detail::add_common(app, common);
  if (const int rc = detail::parse_args(app, args, out, err); rc >= 0) return rc;

  return detail::guarded(err, [&] {
    const ExperimentConfig cfg = detail::resolve(common);
    const auto model = make_generator(static_cast<std::uint64_t>(cfg.integer("model_seed")));
    const auto dir = detail::prepare_out(common, cfg);
    save_generator(model, dir / "model.bin");
    save_features(default_feature_extractor<float>(), dir / "features.bin");
    out << "wrote " << (dir / "model.bin").string() << " (" << model.arch.param_count() << " parameters)\n";
    return kExitOk;
  });
}

/// Dispatches argv[1] to a command.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  const std::string usage =
      "usage: basinproj <command> [options]\n"
      "commands: project, benchmark, recover-transform, blend, gen-target, stats, init-model\n"
      "run 'basinproj <command> --help' for options\n";
  if (argc < 2) {
    err << usage;
    return kExitUsage;
  }
  const std::string cmd = argv[1];
  const std::vector<std::string> rest(argv + 2, argv + argc);
  if (cmd == "project") return cmd_project(rest, out, err);
  if (cmd == "benchmark") return cmd_benchmark(rest, out, err);
  if (cmd == "recover-transform") return cmd_recover_transform(rest, out, err);
  if (cmd == "blend") return cmd_blend(rest, out, err);
  if (cmd == "gen-target") return cmd_gen_target(rest, out, err);
  if (cmd == "stats") return cmd_stats(rest, out, err);
  if (cmd == "init-model") return cmd_init_model(rest, out, err);
  if (cmd == "--help" || cmd == "-h") {
    out << usage;
    return kExitOk;
  }
  err << "unknown command '" << cmd << "'\n" << usage;
  return kExitUsage;
}

}  // namespace basinproj
