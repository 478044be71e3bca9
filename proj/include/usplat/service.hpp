#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "usplat/data.hpp"
#include "usplat/model.hpp"
#include "usplat/rasterizer.hpp"
#include "usplat/trainer.hpp"

namespace httplib {
class Server;
}

namespace usplat {

enum class ImageFormat { Pgm, F32 };
ImageFormat parse_image_format(const std::string& name);

/// Binary P5, 8 bits, value round(clamp(v, 0, 1) * 255).
std::string encode_pgm(const SliceImage& image);
/// Row-major little-endian float32, no header.
std::string encode_f32(const SliceImage& image);

/// A loaded checkpoint plus everything needed to render it on request. Immutable once built.
struct RenderContext {
  GaussianCloud cloud;
  WorldBounds bounds;
  SliceSpec default_spec;
  double p_mass = 0.95;
};

/// Bounds from the checkpoint trailer, else the box around the means. Default slice covers
/// the x/y extent at `spacing` with an identity pose.
RenderContext make_render_context(Checkpoint checkpoint, double spacing = 0.6);

/// The one render path behind both `usplat render` and GET /slice.
SliceImage render_for_output(const RenderContext& context, const SliceSpec& spec);
std::string render_bytes(const RenderContext& context, const SliceSpec& spec, ImageFormat format);

struct SliceRequest {
  SliceSpec spec;
  ImageFormat format = ImageFormat::Pgm;
};

/// Parses rx, ry, rz (deg, ZYX intrinsic), tx, ty, tz (mm), w, h, spacing, fmt, or `m` as 12
/// comma-separated values (row-major rotation, translation) instead of the Euler fields.
/// Unset fields fall back to `defaults`. Throws InvalidParameter with a readable message.
SliceRequest parse_slice_query(const std::multimap<std::string, std::string>& params, const SliceSpec& defaults);

struct ServeOptions {
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> ground_truth;
  double spacing = 0.6;
};

/// HTTP front end. The checkpoint loads on a background thread; until it is ready every
/// endpoint answers 503.
class SliceServer {
 public:
  explicit SliceServer(ServeOptions options);
  ~SliceServer();
  SliceServer(const SliceServer&) = delete;
  SliceServer& operator=(const SliceServer&) = delete;

  /// Starts loading (idempotent). `delay_ms` postpones the load; tests use it to observe 503s.
  void begin_load(int delay_ms = 0);
  /// Blocks until loading finished; rethrows a load failure.
  void wait_loaded();
  bool ready() const { return ready_.load(); }

  /// Binds and serves on a background thread. Port 0 picks a free port. Returns the port.
  int start(const std::string& host, int port);
  /// Binds and serves on the calling thread until stop().
  bool listen(const std::string& host, int port);
  void stop();

 private:
  void install_routes();
  std::shared_ptr<const RenderContext> context() const;

  ServeOptions options_;
  std::unique_ptr<httplib::Server> server_;
  std::thread load_thread_;
  std::thread serve_thread_;
  std::atomic<bool> ready_{false};
  std::atomic<bool> load_started_{false};
  mutable std::mutex mutex_;
  std::shared_ptr<const RenderContext> context_;
  std::shared_ptr<const Volume> ground_truth_;
  std::string load_error_;
};

/// Entry point of the `usplat` tool. Returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace usplat
