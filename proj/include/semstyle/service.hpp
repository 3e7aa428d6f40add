#pragma once

#include <memory>
#include <optional>
#include <string>

#include "semstyle/workspace.hpp"

namespace semstyle {

struct ServiceOptions {
    fs::path workspace;
    std::optional<fs::path> config_file;
    /// Directory holding the built frontend; a minimal built-in page is
    /// served at `/` when empty or missing.
    fs::path static_dir;
    /// Concurrent compute-heavy operations (stylize, mix, inversion jobs).
    int workers = 1;
    /// How long a synchronous request waits for a worker before a 503.
    int wait_ms = 10000;
    /// Jobs waiting for a worker beyond this count are refused with a 503.
    int max_queued_jobs = 16;
};

/// HTTP face of the stylization pipelines. Style models are loaded once at
/// construction and never modified; reference inversions run as background
/// jobs deduplicated through the reference cache.
///
///   GET  /api/styles
///   POST /api/stylize    {image_png_b64, style_id, psi?}
///   POST /api/mix        {image_png_b64, style_id, mode, k, psi, seed?, reference_id?}
///   POST /api/reference  {image_png_b64, style_id} -> {job_id}
///   GET  /api/jobs/{id}
class StudioService {
public:
    explicit StudioService(ServiceOptions options);
    ~StudioService();
    StudioService(const StudioService&) = delete;
    StudioService& operator=(const StudioService&) = delete;

    /// Binds the listening socket; port 0 picks a free one. Returns the port.
    int bind(const std::string& host, int port);
    /// Serves until stop() is called. Requires bind().
    void run();
    /// bind() + run() on a background thread.
    int start(const std::string& host, int port);
    void stop();

    json styles() const;
    /// Total inversion updates performed by reference jobs so far.
    int64_t inversion_steps() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// HTTP status for a library error kind.
int http_status_for(ErrorKind kind);

}  // namespace semstyle
