#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "usplat/errors.hpp"
#include "usplat/metrics.hpp"
#include "usplat/service.hpp"

namespace usplat {

namespace fs = std::filesystem;

namespace {

// Exit codes beyond CLI11's own parse errors.
constexpr int kExitError = 1;
constexpr int kExitUsage = 2;
constexpr int kExitGate = 3;
constexpr int kExitDiverged = 4;

struct PhantomArgs {
  std::string kind = "shells";
  int dims = 64;
  double spacing = 0.6;
  std::uint64_t seed = 0;
  int blobs = 24;
  std::string out;
};

struct StackArgs {
  std::string volume;
  std::string dataset;
  std::string sweep = "axial";
  int n_slices = 64;
  double perturb_deg = 0.0;
  double tilt_deg = 15.0;
  double train_fraction = 0.0;
  std::uint64_t data_seed = 0;
};

struct TrainArgs {
  StackArgs stack;
  std::string preset;
  TrainConfig config;
  bool sequential = false;
  double time_budget_mins = 0.0;
  std::string loss = "l1_ssim";
  std::string out;
  std::string log;
};

struct EvalArgs {
  std::string checkpoint, volume, out, families = "axial,coronal,sagittal";
  int n_per_axis = 16;
  double min_ssim = -1.0;
};

struct RenderArgs {
  std::string checkpoint, pgm, f32, matrix;
  double rx = 0, ry = 0, rz = 0, tx = 0, ty = 0, tz = 0;
  int width = 0, height = 0;
  double spacing = 0.6;
};

struct ServeArgs {
  std::string checkpoint, volume, host = "127.0.0.1";
  int port = 8080;
  double spacing = 0.6;
};

SliceDataset build_dataset(const StackArgs& a, const Volume& vol) {
  SliceDataset ds;
  if (a.sweep == "axial") ds = make_axial_stack(vol, a.n_slices, a.perturb_deg, a.data_seed);
  else if (a.sweep == "random") ds = make_random_sweep(vol, a.n_slices, a.tilt_deg, a.data_seed);
  else throw InvalidParameter("--sweep must be axial or random");
  if (a.train_fraction > 0.0) ds = split_dataset(ds, a.train_fraction, a.data_seed + 1);
  return ds;
}

void add_stack_options(CLI::App* cmd, StackArgs& a) {
  cmd->add_option("--volume", a.volume, "Ground-truth volume stem to slice");
  cmd->add_option("--dataset", a.dataset, "Dataset directory (manifest.json + slices)");
  cmd->add_option("--sweep", a.sweep, "Slice geometry when slicing a volume: axial|random")->capture_default_str();
  cmd->add_option("--n-slices", a.n_slices, "Number of slices")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--perturb-deg", a.perturb_deg, "Axial stack tilt half-range (deg)")->capture_default_str()->check(CLI::NonNegativeNumber);
  cmd->add_option("--tilt-deg", a.tilt_deg, "Random sweep tilt half-range (deg)")->capture_default_str()->check(CLI::NonNegativeNumber);
  cmd->add_option("--train-fraction", a.train_fraction, "Split into train/test (0 keeps every slice for training)")
      ->capture_default_str();
  cmd->add_option("--data-seed", a.data_seed, "Seed for perturbations and splits")->capture_default_str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_file_atomic(path, bytes);
}

int cmd_phantom(const PhantomArgs& a, std::ostream& out) {
  PhantomOptions po;
  po.kind = parse_phantom_kind(a.kind);
  po.dims = a.dims;
  po.spacing = a.spacing;
  po.seed = a.seed;
  po.blob_count = a.blobs;
  const Volume v = make_phantom(po);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  save_volume(v, a.out);
  const Vec3d e = v.extent_mm();
  out << "wrote " << a.out << ".raw + " << a.out << ".json: " << v.width << "x" << v.height << "x" << v.depth
      << " voxels, spacing " << v.spacing << " mm, world extent " << e[0] << " x " << e[1] << " x " << e[2]
      << " mm (+-" << 0.5 * e[0] << " mm)\n";
  return 0;
}

int cmd_dataset(const StackArgs& a, const std::string& out_dir, std::ostream& out) {
  if (a.volume.empty()) throw InvalidParameter("--volume is required");
  const SliceDataset ds = build_dataset(a, load_volume(a.volume));
  save_dataset(ds, out_dir);
  out << "wrote " << ds.slices.size() << " slices (" << ds.count(Split::Train) << " train, " << ds.count(Split::Test)
      << " test) to " << out_dir << "\n";
  return 0;
}

int cmd_train(TrainArgs a, std::ostream& out, std::ostream& err) {
  if (a.stack.volume.empty() == a.stack.dataset.empty()) throw InvalidParameter("give exactly one of --volume or --dataset");
  TrainConfig c = a.config;
  if (!a.preset.empty()) c.n_gaussians = preset(a.preset).n_gaussians;
  if (a.sequential) c.execution = Execution::Sequential;
  c.time_budget_s = 60.0 * a.time_budget_mins;
  if (a.loss == "l2") c.loss = LossKind::L2;
  else if (a.loss != "l1_ssim") throw InvalidParameter("--loss must be l1_ssim or l2");

  TrainOptions opts;
  SliceDataset ds;
  if (!a.stack.volume.empty()) {
    const Volume vol = load_volume(a.stack.volume);
    ds = build_dataset(a.stack, vol);
    opts.bounds = world_bounds(vol);
  } else {
    ds = load_dataset(a.stack.dataset);
  }
  const std::vector<SliceImage> train_slices = ds.subset(Split::Train);
  const fs::path ckpt = a.out;
  opts.log_path = a.log.empty() ? fs::path(a.out + ".log.jsonl") : fs::path(a.log);
  opts.snapshot_dir = ckpt.has_parent_path() ? ckpt.parent_path() : fs::path(".");
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  TrainResult r;
  try {
    r = train(train_slices, c, opts);
  } catch (const TrainingDiverged& e) {
    err << "training diverged: " << e.what() << "\n";
    if (!e.snapshot.empty()) err << "diagnostic snapshot: " << e.snapshot << "\n";
    return kExitDiverged;
  }
  save_checkpoint(ckpt, r.cloud, CheckpointMeta{r.iterations_run, c, r.bounds});
  nlohmann::ordered_json summary = {{"checkpoint", ckpt.string()},
                                    {"log", opts.log_path.string()},
                                    {"iterations", r.iterations_run},
                                    {"stopped_by_budget", r.stopped_by_budget},
                                    {"n_gaussians", r.cloud.size()},
                                    {"train_slices", train_slices.size()},
                                    {"final_train_ssim", r.log.empty() ? 0.0 : r.log.back().train_ssim}};
  out << summary.dump(2) << "\n";
  return 0;
}

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Volume vol = load_volume(a.volume);
  EvalOptions eo;
  eo.families.clear();
  std::stringstream ss(a.families);
  std::string name;
  while (std::getline(ss, name, ',')) {
    if (name == "axial") eo.families.push_back(ViewFamily::Axial);
    else if (name == "coronal") eo.families.push_back(ViewFamily::Coronal);
    else if (name == "sagittal") eo.families.push_back(ViewFamily::Sagittal);
    else throw InvalidParameter("unknown view family '" + name + "'");
  }
  if (eo.families.empty()) throw InvalidParameter("--families is empty");
  eo.render.p_mass = ck.meta.config ? ck.meta.config->p_mass : 0.95;
  eo.render.row_bands = true;
  const EvalReport report = evaluate_views(ck.cloud, vol, a.n_per_axis, eo);
  const std::string text = report.to_json() + "\n";
  if (!a.out.empty()) write_file(a.out, text);
  out << text;
  if (a.min_ssim >= 0.0 && report.mean_ssim() < a.min_ssim) {
    err << "mean SSIM " << report.mean_ssim() << " is below --min-ssim " << a.min_ssim << "\n";
    return kExitGate;
  }
  return 0;
}

int cmd_render(const RenderArgs& a, bool euler_given, std::ostream& out) {
  if (a.pgm.empty() && a.f32.empty()) throw InvalidParameter("give --pgm and/or --f32 output paths");
  const RenderContext ctx = make_render_context(load_checkpoint(a.checkpoint), a.spacing);
  std::multimap<std::string, std::string> q;
  auto put = [&](const char* k, double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    q.emplace(k, s.str());
  };
  if (!a.matrix.empty()) {
    if (euler_given) throw InvalidParameter("give either --matrix or Euler/translation flags, not both");
    q.emplace("m", a.matrix);
  } else {
    put("rx", a.rx), put("ry", a.ry), put("rz", a.rz), put("tx", a.tx), put("ty", a.ty), put("tz", a.tz);
  }
  if (a.width > 0) q.emplace("w", std::to_string(a.width));
  if (a.height > 0) q.emplace("h", std::to_string(a.height));
  const SliceSpec spec = parse_slice_query(q, ctx.default_spec).spec;
  const SliceImage img = render_for_output(ctx, spec);
  if (!a.pgm.empty()) write_file(a.pgm, encode_pgm(img));
  if (!a.f32.empty()) write_file(a.f32, encode_f32(img));
  out << "rendered " << img.width << "x" << img.height << " slice at spacing " << spec.spacing << " mm\n";
  return 0;
}

int cmd_serve(const ServeArgs& a, std::ostream& out) {
  ServeOptions so;
  so.checkpoint = a.checkpoint;
  if (!a.volume.empty()) so.ground_truth = fs::path(a.volume);
  so.spacing = a.spacing;
  SliceServer server(so);
  out << "serving " << a.checkpoint << " on http://" << a.host << ":" << a.port << "\n" << std::flush;
  return server.listen(a.host, a.port) ? 0 : kExitError;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gaussian-splatting slice-to-volume reconstruction", "usplat"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML file with option values (command-line flags take precedence)");

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic ground-truth volume");
  phantom->add_option("--kind", pa.kind, "shells|blobs|checker")->capture_default_str();
  phantom->add_option("--dims", pa.dims, "Voxels per axis (>= 8)")->capture_default_str();
  phantom->add_option("--spacing", pa.spacing, "Voxel spacing (mm)")->capture_default_str();
  phantom->add_option("--seed", pa.seed, "Random seed")->capture_default_str();
  phantom->add_option("--blobs", pa.blobs, "Gaussian count for the blobs phantom")->capture_default_str();
  phantom->add_option("-o,--out", pa.out, "Output stem (writes <stem>.raw and <stem>.json)")->required();

  StackArgs da;
  std::string dataset_out;
  auto* dataset = app.add_subcommand("dataset", "Slice a volume into a dataset directory");
  add_stack_options(dataset, da);
  dataset->add_option("-o,--out", dataset_out, "Output directory")->required();

  TrainArgs ta;
  auto* trainc = app.add_subcommand("train", "Fit a Gaussian cloud to slices");
  add_stack_options(trainc, ta.stack);
  trainc->add_option("--preset", ta.preset, "Model size preset: 20K|100K|200K|300K|2M");
  trainc->add_option("--n-gaussians", ta.config.n_gaussians, "Initial Gaussian count")->capture_default_str();
  trainc->add_option("--iterations", ta.config.iterations, "Optimization steps")->capture_default_str();
  trainc->add_option("--lr", ta.config.lr_general, "Learning rate for non-mean parameters")->capture_default_str();
  trainc->add_option("--lr-means-start", ta.config.lr_means_start)->capture_default_str();
  trainc->add_option("--lr-means-final", ta.config.lr_means_final)->capture_default_str();
  trainc->add_option("--ssim-weight", ta.config.ssim_loss_weight, "Lambda in (1-l) L1 + l (1-SSIM)")->capture_default_str();
  trainc->add_option("--loss", ta.loss, "l1_ssim|l2")->capture_default_str();
  trainc->add_option("--heuristic-interval", ta.config.heuristic_interval)->capture_default_str();
  trainc->add_option("--densify-from", ta.config.densify_from)->capture_default_str();
  trainc->add_option("--densify-until", ta.config.densify_until, "-1: half the iterations")->capture_default_str();
  trainc->add_option("--densify-grad-threshold", ta.config.densify_grad_threshold, "0: adaptive percentile")->capture_default_str();
  trainc->add_option("--prune-alpha", ta.config.prune_alpha_threshold)->capture_default_str();
  trainc->add_option("--p-mass", ta.config.p_mass, "Rasterization mass fraction")->capture_default_str();
  trainc->add_option("--batch", ta.config.batch, "Slices per step")->capture_default_str();
  trainc->add_option("--seed", ta.config.seed)->capture_default_str();
  trainc->add_option("--threads", ta.config.threads, "0: all cores")->capture_default_str();
  trainc->add_flag("--sequential", ta.sequential, "Single-threaded, bit-reproducible");
  trainc->add_option("--time-budget-mins", ta.time_budget_mins, "Stop at this wall-clock budget")->capture_default_str();
  trainc->add_option("--log-interval", ta.config.log_interval)->capture_default_str();
  trainc->add_option("--log", ta.log, "JSON-lines log path (default <out>.log.jsonl)");
  trainc->add_option("-o,--out", ta.out, "Checkpoint path")->required();

  EvalArgs ea;
  auto* evalc = app.add_subcommand("eval", "Score a checkpoint on orthogonal views of a volume");
  evalc->add_option("--checkpoint", ea.checkpoint)->required();
  evalc->add_option("--volume", ea.volume)->required();
  evalc->add_option("--n-per-axis", ea.n_per_axis, "Views per family")->capture_default_str()->check(CLI::PositiveNumber);
  evalc->add_option("--families", ea.families, "Comma-separated subset of axial,coronal,sagittal")->capture_default_str();
  evalc->add_option("--min-ssim", ea.min_ssim, "Exit nonzero when the mean SSIM is lower");
  evalc->add_option("-o,--out", ea.out, "Also write the report here");

  RenderArgs ra;
  auto* renderc = app.add_subcommand("render", "Render one slice from a checkpoint");
  renderc->add_option("--checkpoint", ra.checkpoint)->required();
  auto* orx = renderc->add_option("--rx", ra.rx, "Rotation about x (deg)");
  auto* ory = renderc->add_option("--ry", ra.ry, "Rotation about y (deg)");
  auto* orz = renderc->add_option("--rz", ra.rz, "Rotation about z (deg); R = Rz Ry Rx");
  auto* otx = renderc->add_option("--tx", ra.tx, "Translation x (mm)");
  auto* oty = renderc->add_option("--ty", ra.ty, "Translation y (mm)");
  auto* otz = renderc->add_option("--tz", ra.tz, "Translation z (mm)");
  renderc->add_option("--matrix", ra.matrix, "12 comma-separated values: row-major rotation then translation");
  renderc->add_option("--width", ra.width, "Pixels (default covers the bounds)");
  renderc->add_option("--height", ra.height, "Pixels (default covers the bounds)");
  renderc->add_option("--spacing", ra.spacing, "mm per pixel")->capture_default_str();
  renderc->add_option("--pgm", ra.pgm, "8-bit PGM output");
  renderc->add_option("--f32", ra.f32, "Raw float32 output");

  ServeArgs sa;
  auto* servec = app.add_subcommand("serve", "Serve slices over HTTP");
  servec->add_option("--checkpoint", sa.checkpoint)->required();
  servec->add_option("--volume", sa.volume, "Ground-truth volume for /gt_slice");
  servec->add_option("--host", sa.host)->capture_default_str();
  servec->add_option("--port", sa.port)->envname("USPLAT_PORT")->capture_default_str();
  servec->add_option("--spacing", sa.spacing, "Default slice spacing (mm)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*phantom) return cmd_phantom(pa, out);
    if (*dataset) return cmd_dataset(da, dataset_out, out);
    if (*trainc) return cmd_train(ta, out, err);
    if (*evalc) return cmd_eval(ea, out, err);
    if (*renderc) {
      const bool euler = orx->count() + ory->count() + orz->count() + otx->count() + oty->count() + otz->count() > 0;
      return cmd_render(ra, euler, out);
    }
    if (*servec) return cmd_serve(sa, out);
  } catch (const InvalidParameter& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitUsage;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"usplat"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace usplat
