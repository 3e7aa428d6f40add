#include "semstyle/service.hpp"

#include <httplib.h>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <semaphore>
#include <shared_mutex>
#include <thread>

#include "semstyle/checkpoint.hpp"

namespace semstyle {

namespace {

constexpr const char* kBuiltinPage = R"html(<!doctype html>
<html><head><meta charset="utf-8"><title>semstyle studio</title>
<style>body{font-family:sans-serif;margin:2em}img{width:256px;height:256px;image-rendering:pixelated;border:1px solid #ccc}
label{display:block;margin:.4em 0}</style></head>
<body><h1>semstyle studio</h1>
<p>Minimal page served when no frontend bundle is configured.</p>
<label>Portrait <input type="file" id="file" accept="image/*"></label>
<label>Style <select id="style"></select></label>
<label>Mode <select id="mode"><option>noise</option><option>reference</option></select></label>
<label>k <input type="range" id="k" min="0" value="0"> <span id="kv"></span></label>
<label>psi <input type="range" id="psi" min="0" max="1" step="0.05" value="0.7"> <span id="pv"></span></label>
<label>seed <input type="number" id="seed" value="0"></label>
<label>Reference <input type="file" id="ref" accept="image/*"> <span id="refstatus"></span></label>
<div><img id="src"> <img id="out"></div>
<script>
const $ = id => document.getElementById(id);
let portrait = null, styles = [], referenceId = null, timer = null;
const b64 = f => new Promise(r => { const fr = new FileReader(); fr.onload = () => r(fr.result.split(',')[1]); fr.readAsDataURL(f); });
async function post(path, body) { const r = await fetch(path, {method: 'POST', headers: {'Content-Type': 'application/json'}, body: JSON.stringify(body)}); return [r.status, await r.json()]; }
function current() { return styles.find(s => s.style_id === $('style').value); }
function bounds() { const s = current(); if (!s) return; $('k').max = s.layer_count; if (+$('k').value > s.layer_count) $('k').value = s.layer_count; }
async function render() {
  $('kv').textContent = $('k').value; $('pv').textContent = $('psi').value;
  if (!portrait || !current()) return;
  const body = {image_png_b64: portrait, style_id: $('style').value, mode: $('mode').value, k: +$('k').value, psi: +$('psi').value, seed: +$('seed').value};
  if (body.mode === 'reference') body.reference_id = referenceId;
  const [status, res] = await post('/api/mix', body);
  if (status === 200) $('out').src = 'data:image/png;base64,' + res.image_png_b64; else console.warn(res.error);
}
function schedule() { clearTimeout(timer); timer = setTimeout(render, 250); }
async function init() {
  styles = await (await fetch('/api/styles')).json();
  for (const s of styles) { const o = document.createElement('option'); o.textContent = s.style_id; $('style').appendChild(o); }
  bounds();
  for (const id of ['k', 'psi', 'seed', 'mode']) $(id).oninput = schedule;
  $('style').onchange = () => { bounds(); schedule(); };
  $('file').onchange = async e => { portrait = await b64(e.target.files[0]); $('src').src = 'data:image/png;base64,' + portrait; schedule(); };
  $('ref').onchange = async e => {
    const [status, res] = await post('/api/reference', {image_png_b64: await b64(e.target.files[0]), style_id: $('style').value});
    if (status !== 200) { $('refstatus').textContent = res.error; return; }
    const poll = async () => {
      const job = await (await fetch('/api/jobs/' + res.job_id)).json();
      $('refstatus').textContent = job.status + ' ' + Math.round(100 * job.progress) + '%';
      if (job.status === 'done') { referenceId = job.result_id; schedule(); }
      else if (job.status !== 'failed') setTimeout(poll, 500);
    };
    poll();
  };
}
init();
</script></body></html>
)html";

enum class JobStatus { Queued, Running, Done, Failed };

std::string_view to_string(JobStatus s) {
    switch (s) {
        case JobStatus::Queued: return "queued";
        case JobStatus::Running: return "running";
        case JobStatus::Done: return "done";
        case JobStatus::Failed: return "failed";
    }
    return "unknown";
}

struct Job {
    std::string id;
    std::string style_id;
    std::string image_hash;
    JobStatus status = JobStatus::Queued;
    double progress = 0.0;
    std::optional<std::string> result_id;
    std::optional<std::string> error;
    int64_t inversion_steps = 0;
    bool cache_hit = false;
    torch::Tensor image;

    json to_json() const {
        return {{"id", id},
                {"kind", "invert_reference"},
                {"status", to_string(status)},
                {"progress", progress},
                {"result_id", result_id ? json(*result_id) : json(nullptr)},
                {"error", error ? json(*error) : json(nullptr)},
                {"style_id", style_id},
                {"cache_hit", cache_hit},
                {"inversion_steps", inversion_steps}};
    }
};

struct HttpError {
    int status;
    std::string message;
};

const json& body_field(const json& body, const char* key) {
    if (!body.contains(key)) throw HttpError{400, std::string("missing field '") + key + "'"};
    return body.at(key);
}

template <typename T>
T typed_field(const json& body, const char* key) {
    try {
        return body_field(body, key).get<T>();
    } catch (const json::exception&) {
        throw HttpError{400, std::string("field '") + key + "' has the wrong type"};
    }
}

template <typename T>
std::optional<T> optional_field(const json& body, const char* key) {
    if (!body.contains(key) || body.at(key).is_null()) return std::nullopt;
    return typed_field<T>(body, key);
}

}  // namespace

int http_status_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidCode:
        case ErrorKind::InvalidParameter:
        case ErrorKind::InvalidImage:
        case ErrorKind::Config: return 400;
        case ErrorKind::NotFound: return 404;
        case ErrorKind::Conflict: return 409;
        case ErrorKind::Load:
        case ErrorKind::NumericAbort: return 500;
    }
    return 500;
}

struct StudioService::Impl {
    ServiceOptions options;
    Workspace ws;
    ProjectConfig cfg;
    Encoder e_w{nullptr};
    LossNets nets;
    std::map<std::string, std::shared_ptr<const StyleModels>> styles;
    std::unique_ptr<ReferenceCache> cache;

    std::counting_semaphore<64> workers{0};

    mutable std::shared_mutex jobs_mutex;
    std::map<std::string, std::shared_ptr<Job>> jobs;
    std::map<std::pair<std::string, std::string>, std::string> active;  // (style, hash) -> job id
    uint64_t next_job = 1;
    std::deque<std::shared_ptr<Job>> queue;
    std::condition_variable_any queue_cv;
    bool stopping = false;
    std::thread job_thread;
    std::atomic<int64_t> inversion_steps{0};

    httplib::Server server;
    std::thread server_thread;

    explicit Impl(ServiceOptions opts) : options(std::move(opts)), ws(options.workspace) {
        require(options.workers >= 1 && options.workers <= 64, ErrorKind::Config, "workers must lie in [1, 64]");
        cfg = ws.load_config(options.config_file);
        workers.release(options.workers);
        for (const auto& entry : fs::directory_iterator(ws.root())) {
            if (!entry.is_directory() || !fs::exists(entry.path() / "policy.json")) continue;
            const auto name = entry.path().filename().string();
            styles.emplace(name, std::make_shared<const StyleModels>(load_style(ws, name, cfg.basis_k)));
            log_line("service", "loaded style '" + name + "'");
        }
        auto e_dir = ws.model(encoder_model_name(LatentSpace::W));
        require(fs::exists(e_dir / "manifest.json"), ErrorKind::Config, "W encoder missing at " + e_dir.string());
        e_w = load_encoder(e_dir);
        freeze(*e_w);
        nets = load_loss_nets(ws, cfg);
        cache = std::make_unique<ReferenceCache>(ws.refs_cache());
        job_thread = std::thread([this] { job_loop(); });
        routes();
    }

    ~Impl() {
        server.stop();
        if (server_thread.joinable()) server_thread.join();
        {
            std::unique_lock lock(jobs_mutex);
            stopping = true;
        }
        queue_cv.notify_all();
        if (job_thread.joinable()) job_thread.join();
    }

    const StyleModels& style(const std::string& id) const {
        auto it = styles.find(id);
        if (it == styles.end()) throw HttpError{404, "unknown style '" + id + "'"};
        return *it->second;
    }

    torch::Tensor decode_request_image(const json& body, int resolution) const {
        auto text = typed_field<std::string>(body, "image_png_b64");
        std::vector<std::uint8_t> bytes;
        try {
            bytes = base64_decode(text);
        } catch (const Error&) {
            throw HttpError{400, "image_png_b64 is not valid base64"};
        }
        return decode_image(bytes, resolution);
    }

    /// Holds one worker slot for the duration of a synchronous request.
    struct Slot {
        std::counting_semaphore<64>& sem;
        ~Slot() { sem.release(); }
    };
    Slot acquire_worker() {
        if (!workers.try_acquire_for(std::chrono::milliseconds(options.wait_ms)))
            throw HttpError{503, "all workers are busy"};
        return Slot{workers};
    }

    json handle_stylize(const json& body) {
        const auto& m = style(typed_field<std::string>(body, "style_id"));
        auto image = decode_request_image(body, m.g_prime.config().resolution);
        const double psi = optional_field<double>(body, "psi").value_or(m.policy.truncation_psi);
        auto slot = acquire_worker();
        auto out = stylize_general(image, psi, e_w, m.g_prime);
        return {{"image_png_b64", base64_encode(encode_png(out.image))}};
    }

    json handle_mix(const json& body) {
        const auto style_id = typed_field<std::string>(body, "style_id");
        const auto& m = style(style_id);
        const auto mode = parse_tail_source(typed_field<std::string>(body, "mode"));
        const auto k = typed_field<int64_t>(body, "k");
        const auto psi = typed_field<double>(body, "psi");
        const auto reference_id = optional_field<std::string>(body, "reference_id");
        const auto layers = m.g_prime.config().layer_count();
        if (k < 0 || k > layers)
            throw HttpError{400, "k must lie in [0, " + std::to_string(layers) + "], got " + std::to_string(k)};
        auto image = decode_request_image(body, m.g_prime.config().resolution);
        if (mode == TailSource::Noise) {
            if (reference_id) throw HttpError{409, "mode 'noise' does not take a reference_id"};
            MixSpec spec{.k = k, .tail_source = mode, .truncation_psi = psi,
                         .seed = optional_field<uint64_t>(body, "seed").value_or(0), .reference_id = {}};
            auto slot = acquire_worker();
            auto out = stylize_multimodal_one(image, spec, e_w, m.g_prime);
            return {{"image_png_b64", base64_encode(encode_png(out.image))}};
        }
        if (!reference_id) throw HttpError{409, "mode 'reference' needs a reference_id"};
        auto ref = cache->get(style_id, *reference_id);
        if (!ref) {
            for (const auto& [other, _] : styles)
                if (other != style_id && cache->get(other, *reference_id))
                    throw HttpError{409, "reference '" + *reference_id + "' belongs to style '" + other + "'"};
            throw HttpError{404, "unknown reference '" + *reference_id + "'"};
        }
        auto slot = acquire_worker();
        auto out = stylize_reference(image, m.policy, psi, e_w, m.g_prime, *ref, k);
        return {{"image_png_b64", base64_encode(encode_png(out.image))}};
    }

    json handle_reference(const json& body) {
        const auto style_id = typed_field<std::string>(body, "style_id");
        const auto& m = style(style_id);
        auto image = quantize_8bit(decode_request_image(body, m.g_prime.config().resolution));
        const auto hash = reference_image_hash(image);
        std::unique_lock lock(jobs_mutex);
        if (auto it = active.find({style_id, hash}); it != active.end()) return {{"job_id", it->second}};
        auto job = std::make_shared<Job>();
        job->id = "job-" + std::to_string(next_job++);
        job->style_id = style_id;
        job->image_hash = hash;
        if (cache->get(style_id, hash)) {
            job->status = JobStatus::Done;
            job->progress = 1.0;
            job->result_id = hash;
            job->cache_hit = true;
            jobs.emplace(job->id, job);
            return {{"job_id", job->id}};
        }
        if (static_cast<int>(queue.size()) >= options.max_queued_jobs) throw HttpError{503, "job queue is full"};
        job->image = image;
        jobs.emplace(job->id, job);
        active.emplace(std::make_pair(style_id, hash), job->id);
        queue.push_back(job);
        queue_cv.notify_one();
        return {{"job_id", job->id}};
    }

    json handle_job(const std::string& id) const {
        std::shared_lock lock(jobs_mutex);
        auto it = jobs.find(id);
        if (it == jobs.end()) throw HttpError{404, "unknown job '" + id + "'"};
        return it->second->to_json();
    }

    void job_loop() {
        while (true) {
            std::shared_ptr<Job> job;
            {
                std::unique_lock lock(jobs_mutex);
                queue_cv.wait(lock, [this] { return stopping || !queue.empty(); });
                if (stopping) return;
                job = queue.front();
                queue.pop_front();
            }
            workers.acquire();
            {
                std::unique_lock lock(jobs_mutex);
                job->status = JobStatus::Running;
            }
            try {
                const auto& m = *styles.at(job->style_id);
                auto inv = cfg.inversion;
                inv.progress = [this, job](int done, int total) {
                    ++inversion_steps;
                    std::unique_lock lock(jobs_mutex);
                    // abandons the inversion; nothing is written to the cache
                    if (stopping) throw std::runtime_error("service is stopping");
                    job->progress = static_cast<double>(done) / total;
                };
                ReferenceStats stats;
                auto emb = embed_reference(job->image, job->style_id, m.g_prime, m.basis, *cache, inv, nets, &stats);
                std::unique_lock lock(jobs_mutex);
                job->inversion_steps = stats.inversion_steps;
                job->cache_hit = stats.cache_hit;
                job->result_id = emb.image_hash;
                job->progress = 1.0;
                job->status = JobStatus::Done;
            } catch (const std::exception& e) {
                std::unique_lock lock(jobs_mutex);
                job->error = e.what();
                job->status = JobStatus::Failed;
                log_line("service", "job " + job->id + " failed: " + e.what());
            }
            workers.release();
            std::unique_lock lock(jobs_mutex);
            job->image = torch::Tensor();
            active.erase({job->style_id, job->image_hash});
        }
    }

    json styles_json() const {
        json out = json::array();
        for (const auto& [id, m] : styles)
            out.push_back({{"style_id", id},
                           {"truncation_psi", m->policy.truncation_psi},
                           {"layer_count", m->g_prime.config().layer_count()},
                           {"default_mix_indices", m->policy.default_mix_indices}});
        return out;
    }

    template <typename F>
    static void respond(httplib::Response& res, F&& f) {
        auto error = [&](int status, const std::string& msg) {
            res.status = status;
            res.set_content(json{{"error", msg}}.dump(), "application/json");
        };
        try {
            res.set_content(f().dump(), "application/json");
            res.status = 200;
        } catch (const HttpError& e) {
            error(e.status, e.message);
        } catch (const Error& e) {
            error(http_status_for(e.kind()), e.what());
        } catch (const json::exception& e) {
            error(400, std::string("malformed JSON: ") + e.what());
        } catch (const std::exception& e) {
            error(500, e.what());
        }
    }

    static json parse_body(const httplib::Request& req) {
        auto body = json::parse(req.body);
        if (!body.is_object()) throw HttpError{400, "request body must be a JSON object"};
        return body;
    }

    void routes() {
        server.Get("/api/styles", [this](const httplib::Request&, httplib::Response& res) {
            respond(res, [&] { return styles_json(); });
        });
        server.Post("/api/stylize", [this](const httplib::Request& req, httplib::Response& res) {
            respond(res, [&] { return handle_stylize(parse_body(req)); });
        });
        server.Post("/api/mix", [this](const httplib::Request& req, httplib::Response& res) {
            respond(res, [&] { return handle_mix(parse_body(req)); });
        });
        server.Post("/api/reference", [this](const httplib::Request& req, httplib::Response& res) {
            respond(res, [&] { return handle_reference(parse_body(req)); });
        });
        server.Get(R"(/api/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            respond(res, [&] { return handle_job(req.matches[1]); });
        });
        server.Get(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
            respond(res, []() -> json { throw HttpError{404, "no such endpoint"}; });
        });
        if (!options.static_dir.empty() && fs::is_directory(options.static_dir)) {
            server.set_mount_point("/", options.static_dir.string());
        } else {
            server.Get("/", [](const httplib::Request&, httplib::Response& res) {
                res.set_content(kBuiltinPage, "text/html; charset=utf-8");
            });
        }
    }
};

StudioService::StudioService(ServiceOptions options) : impl_(std::make_unique<Impl>(std::move(options))) {}

StudioService::~StudioService() = default;

int StudioService::bind(const std::string& host, int port) {
    if (port == 0) {
        int bound = impl_->server.bind_to_any_port(host);
        require(bound > 0, ErrorKind::Config, "cannot bind " + host);
        return bound;
    }
    require(impl_->server.bind_to_port(host, port), ErrorKind::Config,
            "cannot bind " + host + ":" + std::to_string(port));
    return port;
}

void StudioService::run() { impl_->server.listen_after_bind(); }

int StudioService::start(const std::string& host, int port) {
    int bound = bind(host, port);
    impl_->server_thread = std::thread([this] { run(); });
    impl_->server.wait_until_ready();
    return bound;
}

void StudioService::stop() {
    impl_->server.stop();
    if (impl_->server_thread.joinable()) impl_->server_thread.join();
}

json StudioService::styles() const { return impl_->styles_json(); }

int64_t StudioService::inversion_steps() const { return impl_->inversion_steps.load(); }

}  // namespace semstyle
