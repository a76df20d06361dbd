#include "mvcond/cli.hpp"

#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "mvcond/checkpoint.hpp"
#include "mvcond/config.hpp"
#include "mvcond/errors.hpp"
#include "mvcond/experiments.hpp"
#include "mvcond/gradsuite.hpp"
#include "mvcond/report.hpp"
#include "mvcond/scenes.hpp"
#include "mvcond/training.hpp"

namespace mvcond {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public Error {
 public:
  using Error::Error;
};

struct Globals {
  std::string config;
  std::optional<uint64_t> seed;
  int threads = 1;
  std::string out;
};

RunConfig config_from(const Globals& g) {
  return g.config.empty() ? RunConfig::from_json(json::object()) : load_run_config(g.config);
}

std::string require_out(const Globals& g, const char* command) {
  if (g.out.empty()) throw UsageError(std::string(command) + " needs --out");
  return g.out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

SphericalPose parse_pose(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      size_t used = 0;
      v.push_back(std::stod(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw UsageError("pose \"" + text + "\" must be THETA_DEG,PHI_DEG[,RADIUS]");
    }
  }
  if (v.size() < 2 || v.size() > 3) throw UsageError("pose \"" + text + "\" must be THETA_DEG,PHI_DEG[,RADIUS]");
  return SphericalPose::from_degrees(v[0], v[1], v.size() == 3 ? v[2] : kDefaultCameraRadius);
}

struct LoadedModel {
  RunConfig config;
  std::unique_ptr<Model> model;
  Checkpoint ckpt;
};

LoadedModel load_model(const fs::path& dir) {
  LoadedModel m;
  m.ckpt = load_checkpoint(dir);
  if (!m.ckpt.meta.contains("run_config")) throw IoError("checkpoint " + dir.string() + " has no run configuration");
  m.config = RunConfig::from_json(m.ckpt.meta["run_config"]);
  m.model = std::make_unique<Model>(m.config.model_config(), m.config.train.seed);
  restore_model(*m.model, m.ckpt);
  return m;
}

void check_model_hash(const Checkpoint& ck, const RunConfig& rc, const std::string& what) {
  if (ck.meta.value("model_hash", std::string()) != rc.model_hash()) {
    throw ConfigError(what + " checkpoint was trained with a different model configuration");
  }
}

std::vector<MultiViewSample> load_data(const std::string& dir, const RunConfig& rc) {
  if (dir.empty()) throw UsageError("--data DIR is required");
  auto data = load_dataset(dir);
  if (data.empty()) throw UsageError("dataset " + dir + " has no scenes");
  for (const auto& s : data) {
    if (s.resolution != rc.data.resolution) {
      throw ConfigError("dataset resolution " + std::to_string(s.resolution) + " does not match data.resolution " +
                        std::to_string(rc.data.resolution));
    }
  }
  return data;
}

json scene_seeds(const std::vector<MultiViewSample>& data) {
  json j = json::array();
  for (const auto& s : data) j.push_back(s.seed);
  return j;
}

int cmd_dataset(const Globals& g, const std::string& split, std::ostream& out) {
  RunConfig rc = config_from(g);
  DatasetOptions o = split == "eval" ? rc.eval_dataset_options(g.threads) : rc.dataset_options(g.threads);
  if (g.seed) o.seed = *g.seed;
  const std::string dir = require_out(g, "dataset");
  make_dataset(o, dir);
  out << "wrote " << o.num_scenes << " scenes x " << o.n_views << " views to " << dir << "\n";
  return kExitOk;
}

struct TrainArgs {
  int stage = 0;
  std::string data, init, base, resume;
  std::vector<std::string> ablate;
};

int cmd_train(const Globals& g, const TrainArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig rc = config_from(g);
  if (a.stage != 0) rc.train.stage = a.stage;
  if (g.seed) rc.train.seed = *g.seed;
  for (const auto& name : a.ablate) {
    if (name == "no-recon") {
      rc.train.ablations.no_recon_loss = true;
    } else if (name == "no-view-cond") {
      rc.train.ablations.no_view_conditioning = true;
    } else if (name == "trainable-unet") {
      rc.train.ablations.trainable_unet = true;
    } else {
      throw UsageError("unknown ablation " + name);
    }
  }
  rc.validate();
  const fs::path dir = require_out(g, "train");
  if (rc.train.stage == 2 && a.resume.empty() && a.init.empty()) {
    throw UsageError("stage 2 needs a stage-1 checkpoint (--init)");
  }
  const auto data = load_data(a.data, rc);
  fs::create_directories(dir);

  Model model(rc.model_config(), rc.train.seed);
  OptimizerState opt;
  std::ios::openmode log_mode = std::ios::trunc;
  if (!a.resume.empty()) {
    const Checkpoint ck = load_checkpoint(a.resume);
    if (ck.config_hash != rc.config_hash()) {
      throw ConfigError("cannot resume: checkpoint config_hash " + ck.config_hash + " differs from " + rc.config_hash());
    }
    restore_model(model, ck);
    opt = restore_optimizer(ck);
    log_mode = std::ios::app;
  } else if (rc.train.stage == 2) {
    const Checkpoint s1 = load_checkpoint(a.init);
    check_model_hash(s1, rc, "stage-1");
    restore_prefix(model, s1, "lift.");
    if (!a.base.empty()) {
      const Checkpoint b = load_checkpoint(a.base);
      check_model_hash(b, rc, "base");
      restore_prefix(model, b, "base.");
    } else if (rc.train.base_steps > 0) {
      std::ofstream blog(dir / "base_log.jsonl", std::ios::trunc);
      OptimizerState bopt;
      train_base(model, rc.train.base_steps, rc.train.batch, rc.train.base_lr, rc.train.seed ^ 0x5bd1e995ULL, data, bopt,
                 [&](const TrainLogEntry& e) {
                   blog << json{{"step", e.step}, {"loss", e.loss}, {"lift_loss", e.lift_loss},
                                {"diffusion_loss", e.diffusion_loss}}.dump()
                        << "\n";
                 });
    } else {
      err << "warning: no --base checkpoint and train.base_steps = 0; the base denoiser stays at its initialization\n";
    }
  }

  const json meta_base{{"stage", rc.train.stage},
                       {"model_hash", rc.model_hash()},
                       {"run_config", rc.to_json()},
                       {"train_scene_seeds", scene_seeds(data)}};
  auto snapshot = [&] {
    json meta = meta_base;
    meta["steps_done"] = opt.step;
    save_checkpoint(dir, capture(model, &opt, rc.config_hash(), meta));
  };

  write_text(dir / "run.json", json{{"config", rc.to_json()},
                                    {"config_hash", rc.config_hash()},
                                    {"model_hash", rc.model_hash()},
                                    {"effective",
                                     {{"lambda_lift", rc.train.stage == 2 ? rc.train.effective_lambda() : 0.0},
                                      {"freeze_base", rc.train.effective_freeze()},
                                      {"view_conditioning", !rc.train.ablations.no_view_conditioning}}}}
                                   .dump(1) +
                                   "\n");
  std::ofstream log(dir / "train_log.jsonl", log_mode);
  const LogFn on_step = [&](const TrainLogEntry& e) {
    log << json{{"step", e.step}, {"loss", e.loss}, {"lift_loss", e.lift_loss}, {"diffusion_loss", e.diffusion_loss}}.dump()
        << "\n";
    if (rc.checkpoint_every > 0 && opt.step % rc.checkpoint_every == 0) {
      log.flush();
      snapshot();
    }
  };
  if (rc.train.stage == 1) {
    train_stage1(model, rc.train, data, opt, on_step);
  } else {
    train_stage2(model, rc.train, data, opt, on_step);
  }
  log.flush();
  snapshot();
  out << "stage " << rc.train.stage << " finished " << opt.step << " steps; checkpoint " << dir.string() << "\n";
  return kExitOk;
}

struct SynthArgs {
  std::string ckpt, scene;
  std::vector<int> views;
  std::vector<std::string> inputs, poses, targets;
  int sweep = 0;
  std::string sampler;
  int steps = 0;
};

int cmd_synth(const Globals& g, const SynthArgs& a, std::ostream& out) {
  if (a.ckpt.empty()) throw UsageError("synth needs --ckpt");
  LoadedModel lm = load_model(a.ckpt);
  const RunConfig& rc = lm.config;

  std::vector<PosedImage> inputs;
  if (!a.scene.empty()) {
    if (!a.inputs.empty()) throw UsageError("use either --scene or --input, not both");
    const MultiViewSample s = load_sample(a.scene);
    std::vector<int> idx = a.views;
    if (idx.empty()) idx = {0, static_cast<int>(s.views.size()) / 2};
    for (int i : idx) {
      if (i < 0 || i >= static_cast<int>(s.views.size())) throw UsageError("view index " + std::to_string(i) + " out of range");
      inputs.push_back({s.views[static_cast<size_t>(i)].image, s.views[static_cast<size_t>(i)].pose});
    }
  } else {
    if (a.inputs.empty()) throw UsageError("synth needs --input images (with --pose) or --scene");
    if (a.poses.size() != a.inputs.size()) {
      throw UsageError("missing pose metadata: " + std::to_string(a.inputs.size()) + " inputs but " +
                       std::to_string(a.poses.size()) + " poses");
    }
    for (size_t i = 0; i < a.inputs.size(); ++i) inputs.push_back({read_png(a.inputs[i]), parse_pose(a.poses[i])});
  }
  if (static_cast<int>(inputs.size()) > rc.max_inputs) {
    throw UsageError("at most " + std::to_string(rc.max_inputs) + " input views are supported");
  }
  for (const auto& in : inputs) {
    if (in.image.width != rc.data.resolution || in.image.height != rc.data.resolution) {
      throw UsageError("input images must be " + std::to_string(rc.data.resolution) + " px square");
    }
  }

  std::vector<SphericalPose> targets;
  for (const auto& t : a.targets) targets.push_back(parse_pose(t));
  if (a.sweep > 0) {
    const double theta = targets.empty() ? inputs[0].pose.theta : targets[0].theta;
    const double radius = targets.empty() ? inputs[0].pose.radius : targets[0].radius;
    targets.clear();
    for (int k = 0; k < a.sweep; ++k) targets.push_back(validated({theta, 2.0 * kPi * k / a.sweep, radius}));
  }
  if (targets.empty()) throw UsageError("synth needs --target or --sweep");

  SynthOptions so = rc.synth_options(g.seed.value_or(0));
  if (!a.sampler.empty()) so.sampler = a.sampler == "ddpm" ? Sampler::kDdpm : Sampler::kDdim;
  if (a.steps > 0) so.steps = a.steps;
  const std::string dest = require_out(g, "synth");
  const bool single = targets.size() == 1 && a.sweep == 0;
  for (size_t k = 0; k < targets.size(); ++k) {
    const Image img = synthesize(*lm.model, inputs, targets[k], so);
    const fs::path path = single ? fs::path(dest) : fs::path(dest) / ("target_" + std::to_string(k) + ".png");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_png(path, img);
    out << "wrote " << path.string() << "\n";
  }
  return kExitOk;
}

int cmd_eval(const Globals& g, const std::string& ckpt, const std::string& data_dir, bool no_synth, std::ostream& out) {
  if (ckpt.empty()) throw UsageError("eval needs --ckpt");
  LoadedModel lm = load_model(ckpt);
  const EvalConfig ec = g.config.empty() ? lm.config.eval : load_run_config(g.config).eval;
  const auto data = load_data(data_dir, lm.config);
  std::set<uint64_t> trained;
  for (const auto& s : lm.ckpt.meta.value("train_scene_seeds", json::array())) trained.insert(s.get<uint64_t>());
  for (const auto& s : data) {
    if (trained.count(s.seed)) throw UsageError("eval scene " + s.scene_id + " was used for training");
  }
  for (int n : ec.view_counts) {
    if (n > lm.config.max_inputs) throw ConfigError("view count " + std::to_string(n) + " exceeds model.max_inputs");
  }
  EvalOptions eo;
  eo.view_counts = ec.view_counts;
  RunConfig tmp = lm.config;
  tmp.eval = ec;
  eo.synth = tmp.synth_options(g.seed.value_or(ec.seed));
  eo.synthesize = ec.synthesize && !no_synth;
  eo.seed = ec.seed;
  const EvalReport report = evaluate(*lm.model, data, eo);
  const json j = report_to_json(report, {ckpt, lm.ckpt.config_hash, static_cast<int>(data.size()), ec.view_counts});
  validate_schema(j, eval_report_schema());
  const fs::path dir = require_out(g, "eval");
  write_text(dir / "report.json", j.dump(1) + "\n");
  write_text(dir / "report.csv", report_to_csv(report));
  for (const auto& r : report.rows) {
    if (r.elevation_deg) continue;
    out << r.view_count << " views: latent PSNR " << r.latent_psnr << " dB, PSNR " << r.psnr << " dB, SSIM " << r.ssim
        << "\n";
  }
  return kExitOk;
}

int cmd_gradcheck(const Globals& g, bool inject_bug, std::ostream& out) {
  GradSuiteOptions o;
  o.seed = g.seed.value_or(0);
  o.inject_bug = inject_bug;
  const GradSuiteResult r = run_grad_suite(o);
  int failed = 0;
  for (const auto& c : r.cases) {
    if (!c.passed) {
      ++failed;
      out << "FAIL " << c.name << " rel.err " << c.error << "\n";
    }
  }
  out << r.cases.size() - failed << "/" << r.cases.size() << " gradient checks passed, max rel.err " << r.max_error
      << ", " << r.seconds << " s\n";
  return failed == 0 ? kExitOk : kExitRuntime;
}

int cmd_ablate(const Globals& g, const std::string& data_dir, const std::string& heldout_dir, std::ostream& out) {
  RunConfig rc = config_from(g);
  if (g.seed) rc.train.seed = *g.seed;
  rc.validate();
  const auto data = load_data(data_dir, rc);
  const auto held = load_data(heldout_dir, rc);
  AblationSettings as;
  as.model = rc.model_config();
  as.train = rc.train;
  as.base_steps = rc.train.base_steps > 0 ? rc.train.base_steps : rc.train.steps;
  as.stage1_steps = rc.train.steps;
  as.stage2_steps = rc.train.steps;
  const AblationReport r = run_ablations(as, data, held, [&](const std::string& line) { out << line << "\n"; });
  const fs::path dir = require_out(g, "ablate");
  write_text(dir / "ablation.json", ablation_to_json(r).dump(1) + "\n");
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-view conditioned novel-view synthesis toolkit", "mvcond"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  uint64_t seed = 0;
  app.add_option("--config", g.config, "Run configuration JSON");
  auto* seed_opt = app.add_option("--seed", seed, "Seed override");
  app.add_option("--threads", g.threads, "Worker threads (dataset rendering)")->check(CLI::Range(1, 256));
  app.add_option("--out", g.out, "Output path");

  std::string split = "train";
  auto* dataset = app.add_subcommand("dataset", "Render a synthetic multi-view dataset");
  dataset->add_option("--split", split, "train or eval scenes")->check(CLI::IsMember({"train", "eval"}));

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train stage 1 (lifting) or stage 2 (conditioning)");
  train->add_option("--stage", ta.stage, "1 or 2")->check(CLI::IsMember({1, 2}));
  train->add_option("--data", ta.data, "Dataset directory");
  train->add_option("--init", ta.init, "Stage-1 checkpoint (stage 2)");
  train->add_option("--base", ta.base, "Checkpoint holding a pretrained base denoiser (stage 2)");
  train->add_option("--resume", ta.resume, "Checkpoint to continue from");
  train->add_option("--ablate", ta.ablate, "no-recon, no-view-cond or trainable-unet")
      ->check(CLI::IsMember({"no-recon", "no-view-cond", "trainable-unet"}));

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Synthesize novel views");
  synth->add_option("--ckpt", sa.ckpt, "Checkpoint directory");
  synth->add_option("--scene", sa.scene, "Scene directory with poses.json");
  synth->add_option("--views", sa.views, "View indices taken from --scene")->delimiter(',');
  synth->add_option("--input", sa.inputs, "Input PNG (repeat; pair with --pose)");
  synth->add_option("--pose", sa.poses, "THETA_DEG,PHI_DEG[,RADIUS] per --input");
  synth->add_option("--target", sa.targets, "Target pose THETA_DEG,PHI_DEG[,RADIUS] (repeatable)");
  synth->add_option("--sweep", sa.sweep, "Render a full azimuth orbit with this many views");
  synth->add_option("--sampler", sa.sampler)->check(CLI::IsMember({"ddpm", "ddim"}));
  synth->add_option("--steps", sa.steps, "DDIM steps");

  std::string eval_ckpt, eval_data;
  bool no_synth = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint over the view-count protocol");
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint directory");
  eval->add_option("--data", eval_data, "Held-out dataset directory");
  eval->add_flag("--no-synth", no_synth, "Only score fused renders");

  bool inject_bug = false;
  auto* grad = app.add_subcommand("gradcheck", "Run the 64-bit finite-difference gradient suite");
  grad->add_flag("--inject-bug", inject_bug)->group("");

  std::string ablate_data, ablate_heldout;
  auto* ablate = app.add_subcommand("ablate", "Paired ablation runs on one dataset");
  ablate->add_option("--data", ablate_data, "Training dataset directory");
  ablate->add_option("--heldout", ablate_heldout, "Held-out dataset directory");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (seed_opt->count() > 0) g.seed = seed;

  try {
    if (dataset->parsed()) return cmd_dataset(g, split, out);
    if (train->parsed()) return cmd_train(g, ta, out, err);
    if (synth->parsed()) return cmd_synth(g, sa, out);
    if (eval->parsed()) return cmd_eval(g, eval_ckpt, eval_data, no_synth, out);
    if (grad->parsed()) return cmd_gradcheck(g, inject_bug, out);
    if (ablate->parsed()) return cmd_ablate(g, ablate_data, ablate_heldout, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const PoleError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace mvcond
