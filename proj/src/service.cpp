#include "usplat/service.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "usplat/errors.hpp"

namespace usplat {

using nlohmann::ordered_json;

ImageFormat parse_image_format(const std::string& name) {
  if (name == "pgm") return ImageFormat::Pgm;
  if (name == "f32") return ImageFormat::F32;
  throw InvalidParameter("fmt must be pgm or f32 (got '" + name + "')");
}

std::string encode_pgm(const SliceImage& image) {
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.reserve(out.size() + image.pixels.size());
  for (float v : image.pixels) {
    const float c = std::isfinite(v) ? std::clamp(v, 0.f, 1.f) : 0.f;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.f))));
  }
  return out;
}

std::string encode_f32(const SliceImage& image) {
  std::ostringstream s(std::ios::binary);
  io::write_f32_le(s, image.pixels.data(), image.pixels.size());
  return std::move(s).str();
}

RenderContext make_render_context(Checkpoint checkpoint, double spacing) {
  if (!(spacing > 0.0)) throw InvalidParameter("default spacing must be > 0");
  RenderContext ctx;
  ctx.cloud = std::move(checkpoint.cloud);
  if (checkpoint.meta.config) ctx.p_mass = checkpoint.meta.config->p_mass;
  if (checkpoint.meta.bounds) {
    ctx.bounds = *checkpoint.meta.bounds;
  } else if (!ctx.cloud.empty()) {
    ctx.bounds = {Vec3d::Constant(1e300), Vec3d::Constant(-1e300)};
    for (std::size_t i = 0; i < ctx.cloud.size(); ++i) {
      const Vec3d m = ctx.cloud.mean(i).cast<double>();
      ctx.bounds.lo = ctx.bounds.lo.cwiseMin(m);
      ctx.bounds.hi = ctx.bounds.hi.cwiseMax(m);
    }
  } else {
    ctx.bounds = {Vec3d::Constant(-1.0), Vec3d::Constant(1.0)};
  }
  const Vec3d size = ctx.bounds.size();
  ctx.default_spec.spacing = spacing;
  ctx.default_spec.width = std::max(1, static_cast<int>(std::lround(size[0] / spacing)));
  ctx.default_spec.height = std::max(1, static_cast<int>(std::lround(size[1] / spacing)));
  ctx.default_spec.pose = ProbePose::translation_only(ctx.bounds.center());
  return ctx;
}

SliceImage render_for_output(const RenderContext& context, const SliceSpec& spec) {
  RenderOptions ro;
  ro.p_mass = context.p_mass;
  ro.execution = Execution::Parallel;
  ro.row_bands = true;
  return render_slice(context.cloud, spec, ro);
}

std::string render_bytes(const RenderContext& context, const SliceSpec& spec, ImageFormat format) {
  const SliceImage img = render_for_output(context, spec);
  return format == ImageFormat::Pgm ? encode_pgm(img) : encode_f32(img);
}

namespace {

double parse_number(const std::string& key, const std::string& text) {
  double v = 0;
  const char* b = text.data();
  const char* e = b + text.size();
  const auto [ptr, ec] = std::from_chars(b, e, v);
  if (text.empty() || ec != std::errc() || ptr != e || !std::isfinite(v)) {
    throw InvalidParameter("parameter '" + key + "' is not a finite number: '" + text + "'");
  }
  return v;
}

int parse_dim(const std::string& key, const std::string& text) {
  const double v = parse_number(key, text);
  if (v != std::floor(v) || v < 1 || v > 4096) throw InvalidParameter("parameter '" + key + "' must be an integer in [1, 4096]");
  return static_cast<int>(v);
}

}  // namespace

SliceRequest parse_slice_query(const std::multimap<std::string, std::string>& params, const SliceSpec& defaults) {
  static const char* kKnown[] = {"rx", "ry", "rz", "tx", "ty", "tz", "w", "h", "spacing", "fmt", "m"};
  std::map<std::string, std::string> single;
  for (const auto& [k, v] : params) {
    if (std::find(std::begin(kKnown), std::end(kKnown), k) == std::end(kKnown)) {
      throw InvalidParameter("unknown parameter '" + k + "'");
    }
    if (!single.emplace(k, v).second) throw InvalidParameter("parameter '" + k + "' given more than once");
  }
  auto num = [&](const char* key, double fallback) {
    const auto it = single.find(key);
    return it == single.end() ? fallback : parse_number(key, it->second);
  };
  SliceRequest req;
  req.spec = defaults;
  if (auto it = single.find("w"); it != single.end()) req.spec.width = parse_dim("w", it->second);
  if (auto it = single.find("h"); it != single.end()) req.spec.height = parse_dim("h", it->second);
  req.spec.spacing = num("spacing", defaults.spacing);
  if (!(req.spec.spacing > 0.0)) throw InvalidParameter("parameter 'spacing' must be > 0");
  if (auto it = single.find("fmt"); it != single.end()) req.format = parse_image_format(it->second);

  const bool euler = single.count("rx") || single.count("ry") || single.count("rz") || single.count("tx") ||
                     single.count("ty") || single.count("tz");
  if (auto it = single.find("m"); it != single.end()) {
    if (euler) throw InvalidParameter("give either 'm' or Euler/translation parameters, not both");
    std::array<double, 12> a{};
    std::stringstream ss(it->second);
    std::string tok;
    std::size_t n = 0;
    while (std::getline(ss, tok, ',')) {
      if (n >= 12) throw InvalidParameter("parameter 'm' needs exactly 12 values");
      a[n++] = parse_number("m", tok);
    }
    if (n != 12) throw InvalidParameter("parameter 'm' needs exactly 12 values");
    req.spec.pose = ProbePose::from_array(a);
  } else if (euler) {
    const Vec3d t(num("tx", 0), num("ty", 0), num("tz", 0));
    req.spec.pose = ProbePose::from_euler_zyx_deg(num("rx", 0), num("ry", 0), num("rz", 0), t);
  }
  return req;
}

SliceServer::SliceServer(ServeOptions options) : options_(std::move(options)), server_(std::make_unique<httplib::Server>()) {
  // Small keep-alive replies otherwise stall on delayed ACKs.
  server_->set_tcp_nodelay(true);
  install_routes();
}

SliceServer::~SliceServer() {
  stop();
  if (load_thread_.joinable()) load_thread_.join();
}

void SliceServer::begin_load(int delay_ms) {
  if (load_started_.exchange(true)) return;
  load_thread_ = std::thread([this, delay_ms] {
    try {
      if (delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
      auto ctx = std::make_shared<const RenderContext>(make_render_context(load_checkpoint(options_.checkpoint), options_.spacing));
      std::shared_ptr<const Volume> gt;
      if (options_.ground_truth) gt = std::make_shared<const Volume>(load_volume(*options_.ground_truth));
      std::lock_guard lock(mutex_);
      context_ = std::move(ctx);
      ground_truth_ = std::move(gt);
      ready_ = true;
    } catch (const std::exception& e) {
      std::lock_guard lock(mutex_);
      load_error_ = e.what();
    }
  });
}

void SliceServer::wait_loaded() {
  if (load_thread_.joinable()) load_thread_.join();
  std::lock_guard lock(mutex_);
  if (!load_error_.empty()) throw FormatError(load_error_);
}

std::shared_ptr<const RenderContext> SliceServer::context() const {
  std::lock_guard lock(mutex_);
  return context_;
}

void SliceServer::install_routes() {
  auto json_error = [](httplib::Response& res, int status, const std::string& message) {
    res.status = status;
    res.set_content(ordered_json{{"error", message}}.dump(), "application/json");
  };
  // Returns null (and fills a 503) while the checkpoint is not ready.
  auto ready_context = [this, json_error](httplib::Response& res) -> std::shared_ptr<const RenderContext> {
    auto ctx = context();
    if (!ctx) {
      std::string failure;
      {
        std::lock_guard lock(mutex_);
        failure = load_error_;
      }
      res.set_header("Retry-After", "1");
      json_error(res, 503, failure.empty() ? "checkpoint is loading" : "checkpoint failed to load: " + failure);
    }
    return ctx;
  };

  server_->Get("/info", [this, ready_context](const httplib::Request&, httplib::Response& res) {
    auto ctx = ready_context(res);
    if (!ctx) return;
    const auto& b = ctx->bounds;
    ordered_json j = {
        {"n_gaussians", ctx->cloud.size()},
        {"world_bounds_mm", {{"lo", {b.lo[0], b.lo[1], b.lo[2]}}, {"hi", {b.hi[0], b.hi[1], b.hi[2]}}}},
        {"default_spec",
         {{"w", ctx->default_spec.width}, {"h", ctx->default_spec.height}, {"spacing", ctx->default_spec.spacing}}},
        {"length_scale_mm", ctx->cloud.length_scale},
        {"p_mass", ctx->p_mass},
        {"ground_truth", ground_truth_ != nullptr}};
    res.set_content(j.dump(), "application/json");
  });

  auto slice_handler = [this, ready_context, json_error](bool ground_truth) {
    return [this, ready_context, json_error, ground_truth](const httplib::Request& req, httplib::Response& res) {
      auto ctx = ready_context(res);
      if (!ctx) return;
      std::shared_ptr<const Volume> gt;
      if (ground_truth) {
        std::lock_guard lock(mutex_);
        gt = ground_truth_;
        if (!gt) return json_error(res, 404, "server was started without a ground-truth volume");
      }
      SliceRequest sr;
      try {
        sr = parse_slice_query(req.params, ctx->default_spec);
      } catch (const InvalidParameter& e) {
        return json_error(res, 400, e.what());
      }
      const SliceImage img = gt ? sample_slice(*gt, sr.spec) : render_for_output(*ctx, sr.spec);
      if (sr.format == ImageFormat::Pgm) {
        res.set_content(encode_pgm(img), "image/x-portable-graymap");
      } else {
        res.set_header("X-Slice-Width", std::to_string(img.width));
        res.set_header("X-Slice-Height", std::to_string(img.height));
        res.set_content(encode_f32(img), "application/octet-stream");
      }
    };
  };
  server_->Get("/slice", slice_handler(false));
  server_->Get("/gt_slice", slice_handler(true));

  server_->set_error_handler([json_error](const httplib::Request& req, httplib::Response& res) {
    if (res.status == 404 && res.body.empty()) json_error(res, 404, "no such endpoint: " + req.path);
  });
  server_->set_exception_handler([json_error](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const InvalidParameter& e) {
      json_error(res, 400, e.what());
    } catch (const std::exception& e) {
      json_error(res, 500, e.what());
    }
  });
}

int SliceServer::start(const std::string& host, int port) {
  begin_load();
  const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  serve_thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

bool SliceServer::listen(const std::string& host, int port) {
  begin_load();
  return server_->listen(host, port);
}

void SliceServer::stop() {
  if (server_) server_->stop();
  if (serve_thread_.joinable()) serve_thread_.join();
}

}  // namespace usplat
