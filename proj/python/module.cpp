// Python bindings for the main pipeline operations.
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "tinyvlm/curation.hpp"
#include "tinyvlm/evaluation.hpp"
#include "tinyvlm/training.hpp"

namespace py = pybind11;
using namespace tinyvlm;

namespace {

std::vector<std::vector<std::vector<double>>> pixels_to_nested(
    const TensorPtr& t) {
    const int h = t->shape[0], w = t->shape[1], c = t->shape[2];
    std::vector<std::vector<std::vector<double>>> out(
        h, std::vector<std::vector<double>>(w, std::vector<double>(c)));
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int k = 0; k < c; ++k)
                out[i][j][k] = t->data[(i * w + j) * c + k];
    return out;
}

}  // namespace

PYBIND11_MODULE(_tinyvlm, m) {
    m.doc() = "toy vision-language alignment pipeline";

    py::class_<SceneObject>(m, "SceneObject")
        .def(py::init<>())
        .def_readwrite("shape", &SceneObject::shape)
        .def_readwrite("color", &SceneObject::color)
        .def_readwrite("row", &SceneObject::row)
        .def_readwrite("col", &SceneObject::col);

    py::class_<Vocabulary>(m, "Vocabulary")
        .def_static("build_default", &Vocabulary::build_default)
        .def_static("load", &Vocabulary::load)
        .def("save", &Vocabulary::save)
        .def("size", &Vocabulary::size)
        .def("tokenize", &Vocabulary::tokenize)
        .def("detokenize", &Vocabulary::detokenize);

    m.def("generate_scene", &generate_scene);
    m.def("caption_detailed",
          [](const std::vector<SceneObject>& objects) {
              SceneSpec scene;
              scene.objects = objects;
              return caption_detailed(scene).text;
          });
    m.def("caption_short",
          [](const std::vector<SceneObject>& objects, double p_noise,
             std::uint64_t seed) {
              SceneSpec scene;
              scene.objects = objects;
              return caption_short(scene, p_noise, seed).text;
          });
    m.def("parse_caption_objects", &parse_caption_objects);
    m.def("render_pixels", [](std::uint64_t seed) {
        return pixels_to_nested(render(generate_scene(seed)).pixels);
    });

    py::class_<SceneSpec>(m, "SceneSpec")
        .def(py::init<>())
        .def_readwrite("objects", &SceneSpec::objects)
        .def_readwrite("seed", &SceneSpec::seed);

    py::class_<ChairResult>(m, "ChairResult")
        .def_readonly("hallucinated", &ChairResult::hallucinated)
        .def_readonly("chair_i", &ChairResult::chair_i)
        .def_readonly("zero_mentions", &ChairResult::zero_mentions)
        .def_property_readonly("mention_count", [](const ChairResult& r) {
            return r.mentions.size();
        });

    m.def("chair_i",
          [](const std::string& caption,
             const std::vector<SceneObject>& ground_truth) {
              return chair_i(caption, ground_truth,
                             ObjectLexicon::build_default());
          });

    py::class_<FailureVerdict>(m, "FailureVerdict")
        .def_readonly("repetition", &FailureVerdict::repetition)
        .def_readonly("fragment", &FailureVerdict::fragment)
        .def_readonly("empty", &FailureVerdict::empty)
        .def_readonly("failed", &FailureVerdict::failed);

    m.def("failure_detect", &failure_detect);
    m.def("format_percent", &format_percent);

    m.def("judge_oracle",
          [](const std::string& reference, const std::string& candidate) {
              OracleJudge judge;
              return judge.judge(reference, candidate) == JudgeVerdict::Yes;
          });
}
