#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "mskl/cli.hpp"
#include "mskl/episodes.hpp"
#include "mskl/error.hpp"
#include "mskl/gradsuite.hpp"
#include "mskl/harness.hpp"
#include "mskl/metalearn.hpp"
#include "mskl/metrics.hpp"
#include "mskl/seqnet.hpp"

namespace py = pybind11;
using namespace mskl;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const F64Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Array(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

F64Array to_numpy(const Array& a) {
  F64Array out(std::vector<py::ssize_t>(a.shape.begin(), a.shape.end()));
  std::copy(a.data.begin(), a.data.end(), out.mutable_data());
  return out;
}

std::vector<metrics::PredictionRecord> to_records(const F64Array& probs, const std::vector<std::size_t>& actual) {
  const Array p = to_array(probs);
  if (p.shape.size() != 2 || p.shape[0] != actual.size()) {
    throw ValidationError("probabilities must be [N x C] with one label per row");
  }
  std::vector<metrics::PredictionRecord> out;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    out.push_back(metrics::make_record(
        std::vector<double>(p.data.begin() + static_cast<long>(i * p.shape[1]),
                            p.data.begin() + static_cast<long>((i + 1) * p.shape[1])),
        actual[i]));
  }
  return out;
}

seqnet::PaddedBatch to_batch(const std::vector<F64Array>& sequences) {
  std::vector<Array> seqs;
  for (const auto& s : sequences) seqs.push_back(to_array(s));
  return episodes::pad_batch(std::span<const Array>(seqs));
}

py::tuple cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  int code;
  {
    py::gil_scoped_release release;
    code = run_cli(args, out, err);
  }
  return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Few-shot meta-learning over multivariate sequences";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);

  m.def("run_cli", &cli, py::arg("args"),
        "Runs the mskl command line in-process. Returns (exit_code, stdout, stderr).");

  m.def(
      "synth",
      [](const std::filesystem::path& out, std::size_t tasks, std::size_t classes, std::size_t dims, double sep,
         double noise, std::size_t min_length, std::size_t max_length, std::size_t min_trials,
         std::size_t max_trials, std::uint64_t seed) {
        episodes::SynthConfig c{tasks, classes, dims, min_length, max_length, min_trials, max_trials, sep, noise, seed};
        const episodes::Metaset ms = episodes::synth_metaset(c);
        episodes::write_metaset(ms, out);
        std::vector<std::string> names;
        for (const auto& t : ms.tasks) names.push_back(t.name);
        return names;
      },
      py::arg("out"), py::arg("tasks") = 4, py::arg("classes") = 3, py::arg("dims") = 4, py::arg("sep") = 2.0,
      py::arg("noise") = 1.0, py::arg("min_length") = 20, py::arg("max_length") = 60, py::arg("min_trials") = 8,
      py::arg("max_trials") = 12, py::arg("seed") = 0,
      "Writes a synthetic metaset (manifest.json plus feature CSVs) and returns its task names.");

  m.def(
      "plan_round_robin",
      [](const std::filesystem::path& manifest, const std::optional<std::string>& test_task) {
        py::list rounds;
        for (const auto& r : harness::plan_round_robin(episodes::load_metaset(manifest), test_task)) {
          py::dict d;
          d["validation"] = r.validation;
          d["sources"] = r.sources;
          d["test"] = r.test;
          rounds.append(d);
        }
        return rounds;
      },
      py::arg("manifest"), py::arg("test_task") = py::none());

  // ---- metrics

  m.def(
      "roc_auc",
      [](const std::vector<double>& scores, const std::vector<int>& labels) { return metrics::roc_auc(scores, labels); },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "tukey_filter",
      [](const std::vector<double>& values, double k) {
        const metrics::TukeyResult r = metrics::tukey_filter(values, k);
        py::dict d;
        d["kept"] = r.kept;
        d["removed"] = r.removed;
        d["removed_index"] = r.removed_index;
        d["lower_fence"] = r.lower_fence;
        d["upper_fence"] = r.upper_fence;
        d["filtered"] = r.filtered;
        return d;
      },
      py::arg("values"), py::arg("k") = 1.5);
  m.def(
      "nts", [](const std::vector<double>& values) { return metrics::nts(values); }, py::arg("values"));
  m.def(
      "qa_trust",
      [](const std::vector<double>& softmax, std::size_t actual, double reward, double penalty) {
        return metrics::qa_trust(metrics::make_record(softmax, actual), metrics::TrustConfig{reward, penalty, 0.5});
      },
      py::arg("softmax"), py::arg("actual"), py::arg("reward") = 1.0, py::arg("penalty") = 1.0);
  m.def(
      "trust_density",
      [](const std::vector<double>& values) {
        const metrics::DensityCurve c = metrics::trust_density(values);
        return py::make_tuple(c.grid, c.density, c.bandwidth);
      },
      py::arg("values"), "Returns (grid, density, bandwidth).");
  m.def(
      "micro_accuracy",
      [](const F64Array& probs, const std::vector<std::size_t>& actual) {
        return metrics::micro_accuracy(to_records(probs, actual));
      },
      py::arg("probabilities"), py::arg("actual"));

  // ---- model operations

  m.def(
      "embed",
      [](const std::vector<F64Array>& sequences, std::uint64_t seed) {
        if (sequences.empty()) throw ValidationError("embed: no sequences");
        const seqnet::PaddedBatch batch = to_batch(sequences);
        const seqnet::Backbone b = seqnet::build_backbone(batch.width(), seed);
        return to_numpy(seqnet::embed(b.params, b.config, batch));
      },
      py::arg("sequences"), py::arg("seed") = 0,
      "Embeds [T x D] sequences with a freshly initialized backbone (seeded).");
  m.def(
      "protonet_posterior",
      [](const F64Array& embeddings, const F64Array& prototypes) {
        return to_numpy(metalearn::protonet_posterior(to_array(embeddings), {to_array(prototypes)}));
      },
      py::arg("embeddings"), py::arg("prototypes"));
  m.def(
      "init_head",
      [](const F64Array& prototypes) {
        const metalearn::Head h = metalearn::init_head({to_array(prototypes)});
        return py::make_tuple(to_numpy(h.weights), to_numpy(h.bias));
      },
      py::arg("prototypes"), "Returns (W, b) with W = 2v, b = -|v|^2.");
  m.def(
      "head_posterior",
      [](const F64Array& embeddings, const F64Array& weights, const F64Array& bias) {
        return to_numpy(
            ad::softmax_rows(seqnet::head_logits(to_array(embeddings), to_array(weights), to_array(bias))));
      },
      py::arg("embeddings"), py::arg("weights"), py::arg("bias"));

  m.def(
      "gradcheck",
      [](std::size_t configs, std::uint64_t seed) {
        gradsuite::SuiteConfig cfg;
        cfg.n_configs = configs;
        cfg.seed = seed;
        gradsuite::SuiteReport r;
        {
          py::gil_scoped_release release;
          r = gradsuite::run_suite(cfg);
        }
        py::dict d;
        d["configs"] = r.configs;
        d["cases"] = r.cases.size();
        d["coords_checked"] = r.coords_checked;
        d["max_rel_error"] = r.max_rel_error;
        d["worst_case"] = r.worst_case;
        d["passed"] = r.passed;
        return d;
      },
      py::arg("configs") = 50, py::arg("seed") = 0);
}
