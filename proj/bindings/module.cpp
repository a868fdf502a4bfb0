// pybind11 surface over the sanitization core. Images cross the boundary as
// float32 numpy arrays shaped (channels, height, width); datasets and models
// stay opaque handles so large corpora are never copied per call.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "diffsan/anomaly.hpp"
#include "diffsan/attack.hpp"
#include "diffsan/classifier.hpp"
#include "diffsan/common.hpp"
#include "diffsan/dataset.hpp"
#include "diffsan/detector.hpp"
#include "diffsan/diffusion.hpp"
#include "diffsan/generate.hpp"
#include "diffsan/kv.hpp"
#include "diffsan/metrics.hpp"
#include "diffsan/pattern_data.hpp"
#include "diffsan/pipeline.hpp"
#include "diffsan/purify.hpp"
#include "diffsan/rng.hpp"

namespace py = pybind11;
using namespace diffsan;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

ImageTensor tensor_from_array(const FloatArray& a) {
  if (a.ndim() != 3) throw ConfigError("image array must have shape (channels, height, width)");
  ImageTensor t(static_cast<uint32_t>(a.shape(0)), static_cast<uint32_t>(a.shape(1)),
                static_cast<uint32_t>(a.shape(2)));
  std::memcpy(t.data.data(), a.data(), sizeof(float) * t.data.size());
  return t;
}

py::array_t<float> array_from_tensor(const ImageTensor& t) {
  py::array_t<float> a({static_cast<py::ssize_t>(t.channels), static_cast<py::ssize_t>(t.height),
                        static_cast<py::ssize_t>(t.width)});
  std::memcpy(a.mutable_data(), t.data.data(), sizeof(float) * t.data.size());
  return a;
}

VarianceMode variance_from_string(const std::string& s) {
  if (s == "fixed_small") return VarianceMode::FixedSmall;
  if (s == "fixed_large") return VarianceMode::FixedLarge;
  throw ConfigError("unknown variance mode '" + s + "' (fixed_small, fixed_large)");
}

TriggerSpec spec_from_kwargs(const std::string& kind, uint32_t patch_size,
                             const std::string& corner, float patch_value,
                             const std::optional<FloatArray>& pattern, float alpha,
                             float freq_magnitude) {
  TriggerSpec spec;
  spec.kind = trigger_kind_from_string(kind);
  spec.patch_size = patch_size;
  spec.corner = corner_from_string(corner);
  spec.patch_value = patch_value;
  spec.alpha = alpha;
  spec.freq_magnitude = freq_magnitude;
  if (spec.kind == TriggerKind::Blend) {
    if (!pattern) throw ConfigError("blend trigger needs a pattern array");
    spec.pattern = tensor_from_array(*pattern);
  }
  return spec;
}

KvDoc doc_from_dict(const py::dict& d) {
  KvDoc doc;
  for (const auto& item : d) {
    const auto key = py::cast<std::string>(item.first);
    const py::handle v = item.second;
    if (py::isinstance<py::bool_>(v)) {
      doc.set_bool(key, py::cast<bool>(v));
    } else if (py::isinstance<py::int_>(v)) {
      doc.set_i64(key, py::cast<int64_t>(v));
    } else if (py::isinstance<py::float_>(v)) {
      doc.set_f64(key, py::cast<double>(v));
    } else {
      doc.set(key, py::cast<std::string>(py::str(v)));
    }
  }
  return doc;
}

py::dict dict_from_doc(const KvDoc& doc) {
  py::dict d;
  for (const std::string& k : doc.keys()) d[py::str(k)] = py::str(*doc.get(k));
  return d;
}

struct PyDataset {
  LabeledDataset ds;
};

struct PyLedger {
  PoisonLedger ledger;
};

py::list ledger_rows(const PoisonLedger& ledger) {
  py::list rows;
  for (const LedgerEntry& e : ledger.entries) {
    py::dict r;
    r["id"] = e.id;
    r["poisoned"] = e.is_poisoned;
    r["original_label"] = e.original_label;
    r["trigger_id"] = e.trigger_id;
    rows.append(std::move(r));
  }
  return rows;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "diffusion-based sanitization of poisoned training sets";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IntegrityError>(m, "IntegrityError", PyExc_RuntimeError);
  py::register_exception<StageError>(m, "StageError", PyExc_RuntimeError);

  // ---- data ----------------------------------------------------------------
  py::class_<PyDataset>(m, "Dataset")
      .def("__len__", [](const PyDataset& d) { return d.ds.size(); })
      .def_property_readonly("num_classes", [](const PyDataset& d) { return d.ds.num_classes; })
      .def("label", [](const PyDataset& d, size_t i) { return d.ds.samples.at(i).label; })
      .def("labels",
           [](const PyDataset& d) {
             std::vector<uint16_t> out;
             out.reserve(d.ds.size());
             for (const Sample& s : d.ds.samples) out.push_back(s.label);
             return out;
           })
      .def("image",
           [](const PyDataset& d, size_t i) { return array_from_tensor(d.ds.samples.at(i).image); })
      .def("digest", [](const PyDataset& d) { return dataset_digest(d.ds); })
      .def("save", [](const PyDataset& d, const std::filesystem::path& dir) {
        save_dataset(d.ds, dir);
      });

  m.def(
      "make_pattern_dataset",
      [](uint32_t count, uint32_t num_classes, uint32_t side, uint64_t seed) {
        PatternDataParams p;
        p.count = count;
        p.num_classes = num_classes;
        p.side = side;
        p.seed = seed;
        return PyDataset{make_pattern_dataset(p)};
      },
      py::arg("count"), py::arg("num_classes") = 10, py::arg("side") = 24, py::arg("seed") = 1,
      "Procedural labeled image corpus used by the desk-scale experiments.");

  m.def(
      "load_dataset",
      [](const std::filesystem::path& dir) { return PyDataset{load_dataset(dir)}; },
      py::arg("dir"));

  // ---- attack ----------------------------------------------------------------
  m.def(
      "apply_trigger",
      [](const FloatArray& image, const std::string& kind, uint32_t patch_size,
         const std::string& corner, float patch_value, const std::optional<FloatArray>& pattern,
         float alpha, float freq_magnitude) {
        const ImageTensor img = tensor_from_array(image);
        const TriggerSpec spec =
            spec_from_kwargs(kind, patch_size, corner, patch_value, pattern, alpha, freq_magnitude);
        spec.validate(img.channels, img.height, img.width);
        return array_from_tensor(apply_trigger(img, spec));
      },
      py::arg("image"), py::arg("kind") = "patch", py::arg("patch_size") = 3,
      py::arg("corner") = "bottom_right", py::arg("patch_value") = 1.0f,
      py::arg("pattern") = std::nullopt, py::arg("alpha") = 0.2f,
      py::arg("freq_magnitude") = 1.0f,
      "Stamp one trigger onto a single image; returns the triggered copy.");

  m.def(
      "poison_dataset",
      [](const PyDataset& ds, double rate, const std::vector<py::dict>& targets, uint64_t seed) {
        PoisonConfig cfg;
        cfg.rate = rate;
        cfg.seed = seed;
        for (const py::dict& t : targets) {
          const auto label = py::cast<uint16_t>(t["label"]);
          auto get_s = [&](const char* k, const char* dflt) {
            return t.contains(k) ? py::cast<std::string>(t[k]) : std::string(dflt);
          };
          auto get_u = [&](const char* k, uint32_t dflt) {
            return t.contains(k) ? py::cast<uint32_t>(t[k]) : dflt;
          };
          auto get_f = [&](const char* k, float dflt) {
            return t.contains(k) ? py::cast<float>(t[k]) : dflt;
          };
          std::optional<FloatArray> pattern;
          if (t.contains("pattern")) pattern = py::cast<FloatArray>(t["pattern"]);
          TriggerSpec spec = spec_from_kwargs(
              get_s("kind", "patch"), get_u("patch_size", 3), get_s("corner", "bottom_right"),
              get_f("patch_value", 1.0f), pattern, get_f("alpha", 0.2f),
              get_f("freq_magnitude", 1.0f));
          spec.id = get_s("id", ("trigger" + std::to_string(cfg.targets.size())).c_str());
          cfg.targets.emplace_back(label, std::move(spec));
        }
        PoisonResult res = poison_dataset(ds.ds, cfg);
        return py::make_tuple(PyDataset{std::move(res.dataset)}, ledger_rows(res.ledger));
      },
      py::arg("dataset"), py::arg("rate"), py::arg("targets"), py::arg("seed") = 0,
      "Label-flip a seeded sample subset and stamp each victim with its target's trigger. "
      "Returns (poisoned_dataset, ledger_rows).");

  m.def(
      "build_asr_testset",
      [](const PyDataset& test, const py::dict& trigger, uint16_t target) {
        auto get_s = [&](const char* k, const char* dflt) {
          return trigger.contains(k) ? py::cast<std::string>(trigger[k]) : std::string(dflt);
        };
        auto get_u = [&](const char* k, uint32_t dflt) {
          return trigger.contains(k) ? py::cast<uint32_t>(trigger[k]) : dflt;
        };
        auto get_f = [&](const char* k, float dflt) {
          return trigger.contains(k) ? py::cast<float>(trigger[k]) : dflt;
        };
        std::optional<FloatArray> pattern;
        if (trigger.contains("pattern")) pattern = py::cast<FloatArray>(trigger["pattern"]);
        const TriggerSpec spec = spec_from_kwargs(
            get_s("kind", "patch"), get_u("patch_size", 3), get_s("corner", "bottom_right"),
            get_f("patch_value", 1.0f), pattern, get_f("alpha", 0.2f),
            get_f("freq_magnitude", 1.0f));
        return PyDataset{build_asr_testset(test.ds, spec, target)};
      },
      py::arg("test"), py::arg("trigger"), py::arg("target"),
      "Triggered copies of every test sample whose true label differs from the target.");

  // ---- classifier ------------------------------------------------------------
  py::class_<Classifier>(m, "Classifier")
      .def("predict",
           [](Classifier& c, const FloatArray& image) {
             return c.predict_one(tensor_from_array(image));
           })
      .def("accuracy",
           [](Classifier& c, const PyDataset& ds) {
             py::gil_scoped_release release;
             const RateWithCounts r = accuracy_counts(c, ds.ds);
             return r.defined() ? r.value() : 0.0;
           })
      .def("save", [](const Classifier& c, const std::filesystem::path& file) { c.save(file); })
      .def_static("load", [](const std::filesystem::path& file) { return Classifier::load(file); });

  m.def(
      "train_classifier",
      [](const PyDataset& ds, uint32_t epochs, uint32_t batch, float lr, uint32_t width,
         uint64_t seed) {
        ClassifierArch arch;
        arch.channels = ds.ds.channels();
        arch.side = ds.ds.height();
        arch.num_classes = ds.ds.num_classes;
        arch.width = width;
        auto model = std::make_unique<Classifier>(arch, child_seed(seed, "classifier-init"));
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.batch_size = batch;
        cfg.lr = lr;
        RngStream rng(child_seed(seed, "classifier-train"));
        std::vector<float> losses;
        {
          py::gil_scoped_release release;
          losses = train_classifier(*model, ds.ds, cfg, rng).epoch_loss;
        }
        return py::make_tuple(std::move(model), losses);
      },
      py::arg("dataset"), py::arg("epochs") = 30, py::arg("batch") = 64, py::arg("lr") = 1e-3f,
      py::arg("width") = 16, py::arg("seed") = 1,
      "Train the compact CNN; returns (classifier, per_epoch_loss).");

  // ---- diffusion ---------------------------------------------------------------
  py::class_<NoiseSchedule>(m, "NoiseSchedule")
      .def_property_readonly("steps", &NoiseSchedule::steps)
      .def("beta_at", &NoiseSchedule::beta_at, py::arg("t"))
      .def("alpha_bar_at", &NoiseSchedule::alpha_bar_at, py::arg("t"));

  m.def("make_schedule", &make_schedule, py::arg("steps"), py::arg("beta_start") = 1e-4,
        py::arg("beta_end") = 0.02, "Linear beta ramp with precomputed running products.");

  m.def(
      "forward_diffuse",
      [](const FloatArray& image, const NoiseSchedule& sched, uint32_t t, uint64_t seed) {
        RngStream rng(seed);
        return array_from_tensor(forward_diffuse(tensor_from_array(image), sched, t, rng));
      },
      py::arg("image"), py::arg("schedule"), py::arg("t"), py::arg("seed") = 0,
      "Closed-form jump to depth t.");

  py::class_<UnetDenoiser>(m, "Denoiser")
      .def("save",
           [](const UnetDenoiser& d, const std::filesystem::path& file) { d.save(file); })
      .def_static("load",
                  [](const std::filesystem::path& file) { return UnetDenoiser::load(file); })
      .def_property_readonly("param_count", &UnetDenoiser::param_count);

  m.def(
      "train_denoiser",
      [](const PyDataset& ds, const NoiseSchedule& sched, uint32_t epochs, uint32_t batch,
         float lr, uint32_t base, uint64_t seed) {
        UnetArch arch;
        arch.in_channels = ds.ds.channels();
        arch.side = ds.ds.height();
        arch.base = base;
        auto model = std::make_unique<UnetDenoiser>(arch, child_seed(seed, "denoiser-init"));
        DenoiseTrainConfig cfg;
        cfg.epochs = epochs;
        cfg.batch_size = batch;
        cfg.lr = lr;
        RngStream rng(child_seed(seed, "denoiser-train"));
        std::vector<float> losses;
        {
          py::gil_scoped_release release;
          losses = train_denoiser(*model, ds.ds, sched, cfg, rng);
        }
        return py::make_tuple(std::move(model), losses);
      },
      py::arg("dataset"), py::arg("schedule"), py::arg("epochs") = 40, py::arg("batch") = 32,
      py::arg("lr") = 2e-3f, py::arg("base") = 8, py::arg("seed") = 1,
      "Train the noise predictor on a clean corpus; returns (denoiser, per_epoch_loss).");

  m.def(
      "purify_sample",
      [](const FloatArray& image, uint32_t sample_id, UnetDenoiser& den,
         const NoiseSchedule& sched, Classifier& victim, uint32_t T, uint32_t n, uint32_t m_,
         uint32_t tau, const std::string& variance, uint64_t seed) {
        const ImageTensor x = tensor_from_array(image);
        PurifyParams p;
        p.T = T;
        p.n = n;
        p.m = m_;
        p.tau = tau;
        p.validate(sched.steps());
        RngStream rng(child_seed(seed, sample_id));
        CandidateSet set;
        {
          py::gil_scoped_release release;
          set = purify_sample(x, sample_id, p, den, sched, variance_from_string(variance), victim,
                              rng);
        }
        py::list out;
        for (const CandidateEntry& e : set.entries) {
          py::dict row;
          row["round"] = e.round;
          row["step"] = e.step;
          row["label"] = e.label;
          row["image"] = array_from_tensor(e.image);
          out.append(std::move(row));
        }
        return out;
      },
      py::arg("image"), py::arg("sample_id"), py::arg("denoiser"), py::arg("schedule"),
      py::arg("victim"), py::arg("T"), py::arg("n"), py::arg("m"), py::arg("tau") = 1,
      py::arg("variance") = "fixed_large", py::arg("seed") = 0,
      "Iterated noising/denoising; returns the n*m recorded reverse states with the victim's "
      "label for each.");

  // ---- voting, detection, selection ------------------------------------------
  m.def(
      "transition_stats",
      [](const std::vector<uint16_t>& labels, uint16_t num_classes) {
        const TransitionStats s = transition_stats(labels, num_classes);
        py::dict d;
        d["counts"] = s.counts;
        d["mode"] = s.mode;
        d["mode_count"] = s.mode_count;
        d["eta"] = s.eta;
        return d;
      },
      py::arg("labels"), py::arg("num_classes"),
      "Label tally over one sample's candidate entries.");

  m.def(
      "classify_sample",
      [](const std::vector<uint16_t>& labels, uint16_t num_classes, uint16_t own_label,
         uint32_t tau, bool strict) {
        const SampleVerdict v =
            classify_sample(transition_stats(labels, num_classes), own_label, tau, strict);
        return py::make_tuple(std::string(1, sample_class_letter(v.cls)),
                              v.cls == SampleClass::Poisoned ? py::cast(v.consensus)
                                                             : py::none().cast<py::object>());
      },
      py::arg("labels"), py::arg("num_classes"), py::arg("own_label"), py::arg("tau"),
      py::arg("strict") = false,
      "Verdict letter (B, P, S) plus the consensus label for P verdicts.");

  m.def("mad_anomaly_index", &mad_anomaly_index, py::arg("scores"),
        "One-sided median-deviation outlier index per score.");

  m.def(
      "kl_metric",
      [](const std::vector<uint64_t>& entry_counts, uint16_t label, uint16_t num_classes,
         double eps) {
        LabelUnion u;
        u.label = label;
        u.contributing = 1;
        u.entry_counts = entry_counts;
        return kl_metric(u, num_classes, eps);
      },
      py::arg("entry_counts"), py::arg("label"), py::arg("num_classes"), py::arg("eps") = 1e-4,
      "Divergence of a pooled candidate-label histogram from its own-label ideal.");

  m.def("select_purified_index", &select_purified_index, py::arg("dists"),
        "Stable rank selection at the 0.8 quantile of descending distance.");

  m.def(
      "ssim",
      [](const FloatArray& a, const FloatArray& b) {
        return ssim_uniform(tensor_from_array(a), tensor_from_array(b));
      },
      py::arg("a"), py::arg("b"), "Mean local structural similarity, 7x7 uniform window.");

  // ---- pipeline ----------------------------------------------------------------
  m.def("default_config", []() { return dict_from_doc(default_config()); },
        "Every config key with its default; doubles as the schema.");

  m.def(
      "run_pipeline",
      [](const py::dict& config, const std::string& through) {
        const KvDoc doc = doc_from_dict(config);
        RunConfig cfg = RunConfig::from_kv(doc);
        cfg.validate();
        const Stage last = stage_from_string(through);
        RunManifest man;
        {
          py::gil_scoped_release release;
          man = run_pipeline(cfg, last);
        }
        py::list out;
        for (const StageOutcome& o : man.outcomes) {
          py::dict row;
          row["stage"] = to_string(o.stage);
          row["ran"] = o.ran;
          row["wall_ms"] = o.wall_ms;
          out.append(std::move(row));
        }
        return out;
      },
      py::arg("config"), py::arg("through") = "evaluate",
      "Run the staged defense inside config['run.dir']; completed stages are skipped.");

  m.def(
      "load_metrics",
      [](const std::filesystem::path& file) {
        py::dict out;
        for (const auto& [name, rate] : load_metrics(file)) {
          py::dict row;
          row["num"] = rate.num;
          row["den"] = rate.den;
          row["value"] = rate.defined() ? py::cast(rate.value()) : py::none().cast<py::object>();
          out[py::str(name)] = std::move(row);
        }
        return out;
      },
      py::arg("file"), "Rates with their raw counts from a metrics table.");

  m.def(
      "load_target_report",
      [](const std::filesystem::path& file) {
        const TargetReport rep = load_target_report(file);
        py::dict out;
        out["threshold"] = rep.threshold;
        out["detected"] = rep.detected;
        py::list rows;
        for (const TargetReportRow& r : rep.rows) {
          py::dict row;
          row["label"] = r.label;
          row["count"] = r.score.count;
          row["kl"] = r.score.kl;
          row["combined"] = r.score.combined;
          row["anomaly_index"] = r.anomaly_index;
          row["detected"] = r.detected;
          rows.append(std::move(row));
        }
        out["rows"] = std::move(rows);
        return out;
      },
      py::arg("file"), "Per-label scores and flagged targets from a detection report.");
}
