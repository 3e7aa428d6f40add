#include <doctest.h>
#include <httplib.h>

#include <chrono>
#include <thread>

#include "semstyle/service.hpp"
#include "test_support.hpp"
#include "tiny_workspace.hpp"

using namespace semstyle;
using namespace semstyle::testing;

namespace {

struct SharedWorkspace {
    TempDir dir{"semstyle-svc"};
    Workspace ws{dir.path()};
    ProjectConfig cfg = tiny_project();

    SharedWorkspace() {
        write_json(ws.config_path(), cfg.to_json());
        build_tiny_workspace(ws, cfg);
        // a second style served from the same generator, for cross-style checks
        fs::create_directories(ws.style_dir("sketch"));
        auto policy = read_json(ws.style_dir("cartoon") / "policy.json");
        policy["style_id"] = "sketch";
        write_json(ws.style_dir("sketch") / "policy.json", policy);
    }

    std::string image_b64(const std::string& set, int index) const {
        char name[16];
        std::snprintf(name, sizeof(name), "%05d.png", index);
        return base64_encode(read_bytes(ws.data(set) / name));
    }
};

SharedWorkspace& shared() {
    static SharedWorkspace instance;
    return instance;
}

struct Running {
    StudioService service;
    int port;
    httplib::Client client;

    explicit Running(ServiceOptions opts)
        : service(std::move(opts)), port(service.start("127.0.0.1", 0)), client("127.0.0.1", port) {
        client.set_read_timeout(120, 0);
    }
    ~Running() { service.stop(); }

    std::pair<int, json> post(const std::string& path, const json& body) {
        return post_raw(path, body.dump());
    }
    std::pair<int, json> post_raw(const std::string& path, const std::string& body) {
        auto res = client.Post(path, body, "application/json");
        REQUIRE(res);
        return {res->status, json::parse(res->body)};
    }
    std::pair<int, json> get(const std::string& path) {
        auto res = client.Get(path);
        REQUIRE(res);
        return {res->status, json::parse(res->body)};
    }
    json wait_job(const std::string& id) {
        for (int i = 0; i < 2000; ++i) {
            auto [status, job] = get("/api/jobs/" + id);
            REQUIRE(status == 200);
            if (job.at("status") == "done" || job.at("status") == "failed") return job;
            std::this_thread::sleep_for(std::chrono::milliseconds(20));
        }
        FAIL("job " << id << " did not finish");
        return {};
    }
};

ServiceOptions options_for(const SharedWorkspace& s) {
    ServiceOptions o;
    o.workspace = s.ws.root();
    return o;
}

std::string png_hash(const json& response) {
    auto bytes = base64_decode(response.at("image_png_b64").get<std::string>());
    return sha256_hex(bytes);
}

}  // namespace

TEST_CASE("error kinds map to http statuses") {
    CHECK(http_status_for(ErrorKind::InvalidParameter) == 400);
    CHECK(http_status_for(ErrorKind::InvalidImage) == 400);
    CHECK(http_status_for(ErrorKind::InvalidCode) == 400);
    CHECK(http_status_for(ErrorKind::Config) == 400);
    CHECK(http_status_for(ErrorKind::NotFound) == 404);
    CHECK(http_status_for(ErrorKind::Conflict) == 409);
    CHECK(http_status_for(ErrorKind::Load) == 500);
    CHECK(http_status_for(ErrorKind::NumericAbort) == 500);
}

TEST_CASE("styles and the frontend page") {
    auto& s = shared();
    Running r(options_for(s));
    auto [status, styles] = r.get("/api/styles");
    CHECK(status == 200);
    REQUIRE(styles.size() == 2);
    CHECK(styles[0].at("style_id") == "cartoon");
    CHECK(styles[0].at("layer_count") == s.cfg.generator.layer_count());
    CHECK(styles[0].at("default_mix_indices") == scaled_mix_indices(s.cfg.generator.layer_count()));
    CHECK(r.service.styles() == styles);

    auto page = r.client.Get("/");
    REQUIRE(page);
    CHECK(page->status == 200);
    CHECK(page->get_header_value("Content-Type").find("text/html") != std::string::npos);
    CHECK(r.get("/api/nothing").first == 404);
}

TEST_CASE("static frontend directory is mounted at the root") {
    auto& s = shared();
    TempDir web;
    write_text_atomic(web / "index.html", "<html>bundle</html>");
    auto opts = options_for(s);
    opts.static_dir = web.path();
    Running r(opts);
    auto page = r.client.Get("/");
    REQUIRE(page);
    CHECK(page->body == "<html>bundle</html>");
    CHECK(r.get("/api/styles").first == 200);
}

TEST_CASE("stylize and mix over http") {
    auto& s = shared();
    Running r(options_for(s));
    const auto portrait = s.image_b64("test", 0);
    const auto L = s.cfg.generator.layer_count();

    auto [st, general] = r.post("/api/stylize", {{"image_png_b64", portrait}, {"style_id", "cartoon"}});
    REQUIRE(st == 200);
    auto decoded = decode_image(base64_decode(general.at("image_png_b64").get<std::string>()), 32);
    CHECK(decoded.sizes() == torch::IntArrayRef({3, 32, 32}));

    // same result as the command line path
    auto cli = cmd_stylize(s.ws, s.cfg, "cartoon", s.ws.data("test") / "00000.png", s.dir / "cli.png", {});
    CHECK(png_hash(general) == cli.at("image_hash"));

    auto [sm, full] = r.post("/api/mix", {{"image_png_b64", portrait},
                                          {"style_id", "cartoon"},
                                          {"mode", "noise"},
                                          {"k", L},
                                          {"psi", s.cfg.policy_psi}});
    REQUIRE(sm == 200);
    CHECK(png_hash(full) == png_hash(general));

    json noise = {{"image_png_b64", portrait}, {"style_id", "cartoon"}, {"mode", "noise"}, {"k", 2}, {"psi", 0.7},
                  {"seed", 4}};
    auto a = r.post("/api/mix", noise);
    auto b = r.post("/api/mix", noise);
    noise["seed"] = 5;
    auto c = r.post("/api/mix", noise);
    CHECK(png_hash(a.second) == png_hash(b.second));
    CHECK(png_hash(a.second) != png_hash(c.second));
}

TEST_CASE("request validation") {
    auto& s = shared();
    Running r(options_for(s));
    const auto portrait = s.image_b64("test", 0);
    json ok = {{"image_png_b64", portrait}, {"style_id", "cartoon"}, {"mode", "noise"}, {"k", 2}, {"psi", 0.7}};

    auto with = [&](const char* key, json value) {
        auto body = ok;
        if (value.is_null()) body.erase(key);
        else body[key] = value;
        return r.post("/api/mix", body).first;
    };
    CHECK(with("image_png_b64", nullptr) == 400);
    CHECK(with("image_png_b64", "!!!") == 400);
    CHECK(with("image_png_b64", base64_encode(std::vector<std::uint8_t>{1, 2, 3})) == 400);
    CHECK(with("k", -1) == 400);
    CHECK(with("k", s.cfg.generator.layer_count() + 1) == 400);
    CHECK(with("k", "two") == 400);
    CHECK(with("mode", "random") == 400);
    CHECK(with("style_id", "oil") == 404);
    CHECK(with("reference_id", "abc") == 409);
    CHECK(r.post_raw("/api/mix", "{ not json").first == 400);
    CHECK(r.post_raw("/api/stylize", "[1, 2]").first == 400);

    auto ref = ok;
    ref["mode"] = "reference";
    CHECK(r.post("/api/mix", ref).first == 409);
    ref["reference_id"] = std::string(64, 'a');
    CHECK(r.post("/api/mix", ref).first == 404);
    CHECK(r.get("/api/jobs/job-999").first == 404);
}

TEST_CASE("reference jobs run once per image and style") {
    auto& s = shared();
    Running r(options_for(s));
    const auto reference = s.image_b64("cartoon", 2);
    json body = {{"image_png_b64", reference}, {"style_id", "cartoon"}};

    auto [st, submitted] = r.post("/api/reference", body);
    REQUIRE(st == 200);
    auto job = r.wait_job(submitted.at("job_id"));
    REQUIRE(job.at("status") == "done");
    CHECK(job.at("cache_hit") == false);
    CHECK(job.at("inversion_steps") == s.cfg.inversion.iters);
    CHECK(job.at("progress") == 1.0);
    CHECK(job.at("kind") == "invert_reference");
    const auto steps = r.service.inversion_steps();
    CHECK(steps == s.cfg.inversion.iters);

    auto [st2, again] = r.post("/api/reference", body);
    REQUIRE(st2 == 200);
    auto [st3, second] = r.get("/api/jobs/" + again.at("job_id").get<std::string>());
    CHECK(st3 == 200);
    CHECK(second.at("status") == "done");
    CHECK(second.at("cache_hit") == true);
    CHECK(second.at("inversion_steps") == 0);
    CHECK(second.at("result_id") == job.at("result_id"));
    CHECK(r.service.inversion_steps() == steps);

    const auto id = job.at("result_id").get<std::string>();
    json mix = {{"image_png_b64", s.image_b64("test", 1)},
                {"style_id", "cartoon"},
                {"mode", "reference"},
                {"reference_id", id},
                {"k", 3},
                {"psi", 0.7}};
    CHECK(r.post("/api/mix", mix).first == 200);
    mix["style_id"] = "sketch";
    auto [cross, err] = r.post("/api/mix", mix);
    CHECK(cross == 409);
    CHECK(err.at("error").get<std::string>().find("cartoon") != std::string::npos);
}

TEST_CASE("busy workers turn synchronous requests away") {
    auto& s = shared();
    auto slow = s.cfg;
    slow.inversion.iters = 1000000;
    write_json(s.dir / "slow.json", slow.to_json());
    auto opts = options_for(s);
    opts.config_file = s.dir / "slow.json";
    opts.workers = 1;
    opts.wait_ms = 50;
    Running r(opts);

    auto [st, submitted] = r.post("/api/reference", {{"image_png_b64", s.image_b64("cartoon", 3)}, {"style_id", "cartoon"}});
    REQUIRE(st == 200);
    const auto id = submitted.at("job_id").get<std::string>();
    for (int i = 0; i < 500 && r.get("/api/jobs/" + id).second.at("status") != "running"; ++i)
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
    REQUIRE(r.get("/api/jobs/" + id).second.at("status") == "running");

    // a duplicate submission joins the running job
    auto [dup_status, dup] =
        r.post("/api/reference", {{"image_png_b64", s.image_b64("cartoon", 3)}, {"style_id", "cartoon"}});
    CHECK(dup_status == 200);
    CHECK(dup.at("job_id") == id);

    auto [busy, err] = r.post("/api/stylize", {{"image_png_b64", s.image_b64("test", 0)}, {"style_id", "cartoon"}});
    CHECK(busy == 503);
    CHECK(err.contains("error"));
    // shutting down abandons the running inversion
}
