// Python bindings. Images cross the boundary as float32 numpy arrays of shape
// (3, R, R) with values in [-1, 1]; pipeline reports come back as dicts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "semstyle/metrics.hpp"
#include "semstyle/stylize.hpp"
#include "semstyle/workspace.hpp"

namespace py = pybind11;
using namespace semstyle;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

torch::Tensor image_from_numpy(const FloatArray& a, int resolution) {
    require(a.ndim() == 3 && a.shape(0) == 3 && a.shape(1) == resolution && a.shape(2) == resolution,
            ErrorKind::InvalidImage,
            "expected an image of shape (3, " + std::to_string(resolution) + ", " + std::to_string(resolution) + ")");
    auto t = torch::from_blob(const_cast<float*>(a.data()), {3, resolution, resolution}, torch::kFloat32).clone();
    require(torch::isfinite(t).all().item<bool>(), ErrorKind::InvalidImage, "image contains non-finite values");
    return t.clamp(-1.0, 1.0);
}

py::array_t<float> to_numpy(const torch::Tensor& t) {
    auto c = t.detach().to(torch::kFloat32).contiguous();
    std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
    py::array_t<float> out(shape);
    std::memcpy(out.mutable_data(), c.data_ptr<float>(), static_cast<size_t>(c.numel()) * sizeof(float));
    return out;
}

py::object to_python(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

struct Options {
    std::string workspace;
    std::optional<std::string> config;
    std::optional<std::string> style;
    Overrides ov;
};

Options options_from(const std::string& workspace, const std::optional<std::string>& config,
                     const std::optional<std::string>& style, std::optional<uint64_t> seed,
                     std::optional<double> psi, std::optional<int64_t> k, std::optional<int> pair_level,
                     std::optional<int> iters) {
    return {workspace, config, style, Overrides{seed, psi, k, pair_level, iters}};
}

template <typename F>
py::object run_command(const Options& o, F&& f) {
    json report;
    {
        py::gil_scoped_release release;
        Workspace ws(o.workspace);
        auto cfg = ws.load_config(o.config ? std::optional<fs::path>(*o.config) : std::nullopt);
        const auto style = o.style.value_or(cfg.style);
        report = f(ws, cfg, style, o.ov);
    }
    return to_python(report);
}

/// In-memory access to one trained style: models are loaded once and every
/// call reuses them.
class StyleSession {
public:
    StyleSession(const std::string& workspace, const std::optional<std::string>& style,
                 const std::optional<std::string>& config)
        : ws_(workspace),
          cfg_(ws_.load_config(config ? std::optional<fs::path>(*config) : std::nullopt)),
          models_(load_style(ws_, style.value_or(cfg_.style), cfg_.basis_k)),
          e_w_(load_encoder(ws_.model(encoder_model_name(LatentSpace::W)))),
          cache_(ws_.refs_cache()) {
        freeze(*e_w_);
    }

    std::string style_id() const { return models_.policy.style_id; }
    int resolution() const { return models_.g_prime.config().resolution; }
    int64_t layer_count() const { return models_.g_prime.config().layer_count(); }
    double truncation_psi() const { return models_.policy.truncation_psi; }
    std::vector<int64_t> default_mix_indices() const { return models_.policy.default_mix_indices; }

    py::array_t<float> stylize(const FloatArray& image, std::optional<double> psi) {
        auto x = image_from_numpy(image, resolution());
        torch::Tensor out;
        {
            py::gil_scoped_release release;
            out = stylize_general(x, psi.value_or(truncation_psi()), e_w_, models_.g_prime).image;
        }
        return to_numpy(out);
    }

    py::array_t<float> mix(const FloatArray& image, std::optional<int64_t> k, std::optional<double> psi,
                           uint64_t seed) {
        auto x = image_from_numpy(image, resolution());
        MixSpec spec;
        spec.k = resolve_k(k);
        spec.truncation_psi = psi.value_or(truncation_psi());
        spec.seed = seed;
        torch::Tensor out;
        {
            py::gil_scoped_release release;
            out = stylize_multimodal_one(x, spec, e_w_, models_.g_prime).image;
        }
        return to_numpy(out);
    }

    py::dict embed_reference(const FloatArray& image, std::optional<int> iters) {
        auto x = image_from_numpy(image, resolution());
        ReferenceStats stats;
        std::string id;
        {
            py::gil_scoped_release release;
            if (!nets_) nets_ = load_loss_nets(ws_, cfg_);
            auto inv = cfg_.inversion;
            if (iters) inv.iters = *iters;
            id = semstyle::embed_reference(x, style_id(), models_.g_prime, models_.basis, cache_, inv, *nets_, &stats)
                     .image_hash;
        }
        py::dict d;
        d["reference_id"] = id;
        d["cache_hit"] = stats.cache_hit;
        d["inversion_steps"] = stats.inversion_steps;
        return d;
    }

    py::array_t<float> mix_reference(const FloatArray& image, const std::string& reference_id,
                                     std::optional<int64_t> k, std::optional<double> psi) {
        auto x = image_from_numpy(image, resolution());
        const auto kk = resolve_k(k);
        torch::Tensor out;
        {
            py::gil_scoped_release release;
            auto ref = cache_.get(style_id(), reference_id);
            require(ref.has_value(), ErrorKind::NotFound, "unknown reference '" + reference_id + "'");
            out = stylize_reference(x, models_.policy, psi.value_or(truncation_psi()), e_w_, models_.g_prime, *ref, kk)
                      .image;
        }
        return to_numpy(out);
    }

private:
    int64_t resolve_k(std::optional<int64_t> k) const {
        const auto& idx = models_.policy.default_mix_indices;
        const int64_t value = k.value_or(idx.empty() ? layer_count() : idx.front());
        require(value >= 0 && value <= layer_count(), ErrorKind::InvalidParameter,
                "k must lie in [0, " + std::to_string(layer_count()) + "]");
        return value;
    }

    Workspace ws_;
    ProjectConfig cfg_;
    StyleModels models_;
    Encoder e_w_;
    ReferenceCache cache_;
    std::optional<LossNets> nets_;
};

double fid_numpy(const DoubleArray& a, const DoubleArray& b) {
    auto wrap = [](const DoubleArray& x) {
        require(x.ndim() == 2, ErrorKind::InvalidParameter, "features must be a 2-D array");
        return FeatureSet(torch::from_blob(const_cast<double*>(x.data()), {x.shape(0), x.shape(1)}, torch::kFloat64)
                              .clone(),
                          "numpy");
    };
    return fid(wrap(a), wrap(b));
}

// Exception classes live for the whole interpreter lifetime.
struct ErrorClasses {
    PyObject* base = nullptr;
    PyObject* invalid = nullptr;
    PyObject* config = nullptr;
    PyObject* load = nullptr;
    PyObject* numeric = nullptr;
    PyObject* not_found = nullptr;
    PyObject* conflict = nullptr;
};

ErrorClasses& error_classes() {
    static ErrorClasses classes;
    return classes;
}

void translate_error(std::exception_ptr p) {
    try {
        if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
        const auto& c = error_classes();
        PyObject* cls = c.base;
        switch (e.kind()) {
            case ErrorKind::InvalidCode:
            case ErrorKind::InvalidParameter:
            case ErrorKind::InvalidImage: cls = c.invalid; break;
            case ErrorKind::Config: cls = c.config; break;
            case ErrorKind::Load: cls = c.load; break;
            case ErrorKind::NumericAbort: cls = c.numeric; break;
            case ErrorKind::NotFound: cls = c.not_found; break;
            case ErrorKind::Conflict: cls = c.conflict; break;
        }
        PyErr_SetString(cls, e.what());
    }
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Constrained StyleGAN fine-tuning for portrait stylization";
    configure_runtime();

    auto& cls = error_classes();
    cls.base = PyErr_NewException("semstyle.SemstyleError", PyExc_RuntimeError, nullptr);
    auto sub = [&](const char* name, PyObject* extra) {
        py::tuple bases = extra ? py::tuple(py::make_tuple(py::handle(cls.base), py::handle(extra)))
                                : py::tuple(py::make_tuple(py::handle(cls.base)));
        return PyErr_NewException(name, bases.ptr(), nullptr);
    };
    cls.invalid = sub("semstyle.InvalidInputError", PyExc_ValueError);
    cls.config = sub("semstyle.ConfigError", nullptr);
    cls.load = sub("semstyle.LoadError", nullptr);
    cls.numeric = sub("semstyle.NumericAbortError", nullptr);
    cls.not_found = sub("semstyle.NotFoundError", PyExc_LookupError);
    cls.conflict = sub("semstyle.ConflictError", nullptr);
    m.attr("SemstyleError") = py::handle(cls.base);
    m.attr("InvalidInputError") = py::handle(cls.invalid);
    m.attr("ConfigError") = py::handle(cls.config);
    m.attr("LoadError") = py::handle(cls.load);
    m.attr("NumericAbortError") = py::handle(cls.numeric);
    m.attr("NotFoundError") = py::handle(cls.not_found);
    m.attr("ConflictError") = py::handle(cls.conflict);
    py::register_exception_translator(&translate_error);

#define SEMSTYLE_COMMON_ARGS                                                                                   \
    py::arg("workspace"), py::kw_only(), py::arg("config") = py::none(), py::arg("style") = py::none(),        \
        py::arg("seed") = py::none(), py::arg("psi") = py::none(), py::arg("k") = py::none(),                  \
        py::arg("pair_level") = py::none(), py::arg("iters") = py::none()
#define SEMSTYLE_COMMON_PARAMS                                                                                 \
    const std::string &workspace, const std::optional<std::string>&config, const std::optional<std::string>&style, \
        std::optional<uint64_t> seed, std::optional<double> psi, std::optional<int64_t> k,                    \
        std::optional<int> pair_level, std::optional<int> iters
#define SEMSTYLE_OPTIONS options_from(workspace, config, style, seed, psi, k, pair_level, iters)

    m.def(
        "make_data",
        [](SEMSTYLE_COMMON_PARAMS) {
            auto o = SEMSTYLE_OPTIONS;
            return run_command(o, [&](const Workspace& ws, ProjectConfig cfg, const std::string& s, const Overrides&) {
                cfg.style = s;
                if (seed) cfg.data.seed = *seed;
                return cmd_make_data(ws, cfg);
            });
        },
        "Render the synthetic real, test and style image sets.", SEMSTYLE_COMMON_ARGS);
    m.def(
        "pretrain",
        [](SEMSTYLE_COMMON_PARAMS) {
            return run_command(SEMSTYLE_OPTIONS, [](const Workspace& ws, ProjectConfig cfg, const std::string&,
                                                    const Overrides& ov) { return cmd_pretrain(ws, cfg, ov); });
        },
        "Train the real-face generator and discriminator.", SEMSTYLE_COMMON_ARGS);
    m.def(
        "train_encoder",
        [](const std::string& space, SEMSTYLE_COMMON_PARAMS) {
            return run_command(SEMSTYLE_OPTIONS, [&](const Workspace& ws, ProjectConfig cfg, const std::string&,
                                                     const Overrides& ov) {
                return cmd_train_encoder(ws, cfg, parse_latent_space(space), ov);
            });
        },
        "Train the W, WPlus or ZPlus encoder.", py::arg("space"), SEMSTYLE_COMMON_ARGS);
    m.def(
        "finetune_unconstrained",
        [](SEMSTYLE_COMMON_PARAMS) {
            return run_command(SEMSTYLE_OPTIONS, [](const Workspace& ws, ProjectConfig cfg, const std::string& s,
                                                    const Overrides& ov) {
                return cmd_finetune_unconstrained(ws, cfg, s, ov);
            });
        },
        "Adversarial-only fine-tuning.", SEMSTYLE_COMMON_ARGS);
    m.def(
        "make_pairs",
        [](SEMSTYLE_COMMON_PARAMS) {
            return run_command(SEMSTYLE_OPTIONS, [](const Workspace& ws, ProjectConfig cfg, const std::string& s,
                                                    const Overrides& ov) { return cmd_make_pairs(ws, cfg, s, ov); });
        },
        "Build the pseudo-paired dataset.", SEMSTYLE_COMMON_ARGS);
    m.def(
        "finetune",
        [](SEMSTYLE_COMMON_PARAMS, std::optional<double> lambda_semantic, std::optional<double> lambda_paired) {
            return run_command(SEMSTYLE_OPTIONS, [&](const Workspace& ws, ProjectConfig cfg, const std::string& s,
                                                     const Overrides& ov) {
                if (lambda_semantic) cfg.finetune.lambda_semantic = *lambda_semantic;
                if (lambda_paired) cfg.finetune.lambda_paired = *lambda_paired;
                return cmd_finetune(ws, cfg, s, ov);
            });
        },
        "Constrained fine-tuning; writes the style generator and policy.", SEMSTYLE_COMMON_ARGS,
        py::arg("lambda_semantic") = py::none(), py::arg("lambda_paired") = py::none());
    m.def(
        "evaluate",
        [](std::optional<std::string> generator, SEMSTYLE_COMMON_PARAMS) {
            return run_command(SEMSTYLE_OPTIONS, [&](const Workspace& ws, ProjectConfig cfg, const std::string& s,
                                                     const Overrides& ov) {
                return cmd_evaluate(ws, cfg, s, generator ? std::optional<fs::path>(*generator) : std::nullopt, ov);
            });
        },
        "Metrics report for a fine-tuned generator.", py::arg("generator") = py::none(), SEMSTYLE_COMMON_ARGS);
    m.def(
        "stylize_file",
        [](const std::string& input, const std::string& output, SEMSTYLE_COMMON_PARAMS) {
            return run_command(SEMSTYLE_OPTIONS, [&](const Workspace& ws, ProjectConfig cfg, const std::string& s,
                                                     const Overrides& ov) {
                return cmd_stylize(ws, cfg, s, input, output, ov);
            });
        },
        py::arg("input"), py::arg("output"), SEMSTYLE_COMMON_ARGS);

#undef SEMSTYLE_COMMON_ARGS
#undef SEMSTYLE_COMMON_PARAMS
#undef SEMSTYLE_OPTIONS

    py::class_<StyleSession>(m, "StyleSession")
        .def(py::init<const std::string&, const std::optional<std::string>&, const std::optional<std::string>&>(),
             py::arg("workspace"), py::arg("style") = py::none(), py::arg("config") = py::none())
        .def_property_readonly("style_id", &StyleSession::style_id)
        .def_property_readonly("resolution", &StyleSession::resolution)
        .def_property_readonly("layer_count", &StyleSession::layer_count)
        .def_property_readonly("truncation_psi", &StyleSession::truncation_psi)
        .def_property_readonly("default_mix_indices", &StyleSession::default_mix_indices)
        .def("stylize", &StyleSession::stylize, py::arg("image"), py::arg("psi") = py::none())
        .def("mix", &StyleSession::mix, py::arg("image"), py::arg("k") = py::none(), py::arg("psi") = py::none(),
             py::arg("seed") = 0)
        .def("embed_reference", &StyleSession::embed_reference, py::arg("image"), py::arg("iters") = py::none())
        .def("mix_reference", &StyleSession::mix_reference, py::arg("image"), py::arg("reference_id"),
             py::arg("k") = py::none(), py::arg("psi") = py::none());

    m.def("fid", &fid_numpy, "Frechet distance between two (N, m) feature arrays.", py::arg("a"), py::arg("b"));
    m.def("scaled_mix_indices", [](int64_t layers) { return scaled_mix_indices(layers); }, py::arg("layer_count"));
    m.def(
        "load_image",
        [](const std::string& path, int resolution) { return to_numpy(load_image(path, resolution)); },
        py::arg("path"), py::arg("resolution"));
    m.def(
        "save_png", [](const std::string& path, const FloatArray& image) {
            require(image.ndim() == 3, ErrorKind::InvalidImage, "expected a (3, R, R) image");
            save_png(path, image_from_numpy(image, static_cast<int>(image.shape(1))));
        },
        py::arg("path"), py::arg("image"));
}
