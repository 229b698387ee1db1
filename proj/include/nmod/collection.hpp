#pragma once

#include <memory>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "nmod/graph.hpp"
#include "nmod/module.hpp"
#include "nmod/typesys.hpp"

namespace nmod {

/// Tags shipped with the standard collection (same content as
/// data/tags.json).
inline constexpr std::string_view kStdTagsJson = R"json({
  "tags": [
    {"name": "Spectrogram", "parent": "Channel"},
    {"name": "Encoded", "parent": "Channel"},
    {"name": "WordEmbedding", "parent": "Embedding"}
  ]
})json";

/// Built-in tags plus the shipped tags plus an optional extra tag file,
/// frozen.
inline std::shared_ptr<const TagHierarchy> make_std_tags(const std::string& extra_tags_file = {}) {
  auto h = std::make_shared<TagHierarchy>();
  h->load_json(nlohmann::json::parse(kStdTagsJson));
  if (!extra_tags_file.empty()) h->load_file(extra_tags_file);
  h->freeze();
  return h;
}

/// The standard descriptors in descriptor-file form. Composites come after
/// the classes they use.
inline constexpr std::string_view kStdDescriptorsJson = R"json([
{
  "name": "Linear",
  "doc": "y = x W^T + b over the last axis",
  "params": [
    {"name": "in_features", "kind": "int", "min": 1},
    {"name": "out_features", "kind": "int", "min": 1},
    {"name": "seed", "kind": "int", "default": 0},
    {"name": "init", "kind": "string", "default": "glorot", "choices": ["glorot", "zeros"]},
    {"name": "lead", "kind": "string-list", "default": ["Batch"]},
    {"name": "in_tag", "kind": "string", "default": "Channel"},
    {"name": "out_tag", "kind": "string", "default": "Channel"}
  ],
  "inputs": [{"name": "x", "type": "[$lead*, $in_tag:$in_features]"}],
  "outputs": [{"name": "y", "type": "[$lead*, $out_tag:$out_features]"}],
  "impl": {"primitive": "linear"}
},
{
  "name": "ReLU",
  "params": [
    {"name": "features", "kind": "int", "min": 1},
    {"name": "lead", "kind": "string-list", "default": ["Batch"]},
    {"name": "tag", "kind": "string", "default": "Channel"}
  ],
  "inputs": [{"name": "x", "type": "[$lead*, $tag:$features]"}],
  "outputs": [{"name": "y", "type": "[$lead*, $tag:$features]"}],
  "impl": {"primitive": "relu"}
},
{
  "name": "Tanh",
  "params": [
    {"name": "features", "kind": "int", "min": 1},
    {"name": "lead", "kind": "string-list", "default": ["Batch"]},
    {"name": "tag", "kind": "string", "default": "Channel"}
  ],
  "inputs": [{"name": "x", "type": "[$lead*, $tag:$features]"}],
  "outputs": [{"name": "y", "type": "[$lead*, $tag:$features]"}],
  "impl": {"primitive": "tanh"}
},
{
  "name": "LogSoftmax",
  "params": [
    {"name": "features", "kind": "int", "min": 1},
    {"name": "lead", "kind": "string-list", "default": ["Batch"]},
    {"name": "in_tag", "kind": "string", "default": "Channel"}
  ],
  "inputs": [{"name": "x", "type": "[$lead*, $in_tag:$features]"}],
  "outputs": [{"name": "log_probs", "type": "[$lead*, LogProbs:$features]"}],
  "impl": {"primitive": "log_softmax"}
},
{
  "name": "NllLoss",
  "doc": "mean negative log-likelihood over rows whose label is not ignore_index",
  "params": [
    {"name": "classes", "kind": "int", "min": 1},
    {"name": "lead", "kind": "string-list", "default": ["Batch"]},
    {"name": "labels_type", "kind": "string", "default": "[Batch, Label:1]"},
    {"name": "ignore_index", "kind": "int", "default": -100}
  ],
  "inputs": [
    {"name": "log_probs", "type": "[$lead*, LogProbs:$classes]"},
    {"name": "labels", "type": "$labels_type"}
  ],
  "outputs": [{"name": "loss", "type": "scalar(Loss)"}],
  "impl": {"primitive": "nll_loss"}
},
{
  "name": "Accuracy",
  "params": [
    {"name": "classes", "kind": "int", "min": 1},
    {"name": "lead", "kind": "string-list", "default": ["Batch"]},
    {"name": "labels_type", "kind": "string", "default": "[Batch, Label:1]"},
    {"name": "ignore_index", "kind": "int", "default": -100}
  ],
  "inputs": [
    {"name": "log_probs", "type": "[$lead*, LogProbs:$classes]"},
    {"name": "labels", "type": "$labels_type"}
  ],
  "outputs": [{"name": "accuracy", "type": "scalar(Metric)"}],
  "impl": {"primitive": "accuracy"}
},
{
  "name": "MseLoss",
  "params": [
    {"name": "features", "kind": "int", "min": 1},
    {"name": "lead", "kind": "string-list", "default": ["Batch"]},
    {"name": "tag", "kind": "string", "default": "Channel"}
  ],
  "inputs": [
    {"name": "prediction", "type": "[$lead*, $tag:$features]"},
    {"name": "target", "type": "[$lead*, $tag:$features]"}
  ],
  "outputs": [{"name": "loss", "type": "scalar(Loss)"}],
  "impl": {"primitive": "mse_loss"}
},
{
  "name": "Concat",
  "doc": "along=Batch stacks rows of [Batch, tag:left_dim]; any other value names the feature tag to join",
  "params": [
    {"name": "along", "kind": "string"},
    {"name": "left_dim", "kind": "int", "min": 1},
    {"name": "right_dim", "kind": "int", "default": 0, "min": 0},
    {"name": "tag", "kind": "string", "default": "Channel"}
  ],
  "inputs": [
    {"name": "left", "type": "[Batch, $tag:$left_dim]", "when": "along=Batch"},
    {"name": "right", "type": "[Batch, $tag:$left_dim]", "when": "along=Batch"},
    {"name": "left", "type": "[Batch, $along:$left_dim]", "when": "along!=Batch"},
    {"name": "right", "type": "[Batch, $along:$right_dim]", "when": "along!=Batch"}
  ],
  "outputs": [
    {"name": "y", "type": "[Batch, $tag:$left_dim]", "when": "along=Batch"},
    {"name": "y", "type": "[Batch, $along:$left_dim+$right_dim]", "when": "along!=Batch"}
  ],
  "impl": {"primitive": "concat"}
},
{
  "name": "Add",
  "params": [
    {"name": "features", "kind": "int", "min": 1},
    {"name": "lead", "kind": "string-list", "default": ["Batch"]},
    {"name": "tag", "kind": "string", "default": "Channel"}
  ],
  "inputs": [
    {"name": "a", "type": "[$lead*, $tag:$features]"},
    {"name": "b", "type": "[$lead*, $tag:$features]"}
  ],
  "outputs": [{"name": "y", "type": "[$lead*, $tag:$features]"}],
  "impl": {"primitive": "add"}
},
{
  "name": "Transpose",
  "doc": "output axis i is input axis perm[i]",
  "params": [
    {"name": "input_type", "kind": "string"},
    {"name": "perm", "kind": "int-list", "min": 0}
  ],
  "inputs": [{"name": "x", "type": "$input_type"}],
  "outputs": [{"name": "y", "type": "$input_type@$perm"}],
  "impl": {"primitive": "transpose"}
},
{
  "name": "EmbeddingLookup",
  "params": [
    {"name": "vocab_size", "kind": "int", "min": 1},
    {"name": "dim", "kind": "int", "min": 1},
    {"name": "lead", "kind": "string-list", "default": ["Batch", "Time"]},
    {"name": "tag", "kind": "string", "default": "Embedding"}
  ],
  "inputs": [{"name": "ids", "type": "[$lead*]"}],
  "outputs": [{"name": "y", "type": "[$lead*, $tag:$dim]"}],
  "impl": {"primitive": "embedding_lookup"}
},
{
  "name": "RnnCell",
  "doc": "teacher-forced h_t = tanh(W_x x_t + W_h h_{t-1} + F[y_{t-1}] + b)",
  "params": [
    {"name": "in_features", "kind": "int", "min": 1},
    {"name": "hidden", "kind": "int", "min": 1},
    {"name": "vocab_size", "kind": "int", "min": 1},
    {"name": "in_tag", "kind": "string", "default": "Channel"},
    {"name": "out_tag", "kind": "string", "default": "Channel"}
  ],
  "inputs": [
    {"name": "x", "type": "[Batch, Time, $in_tag:$in_features]"},
    {"name": "targets", "type": "[Batch, Time]"}
  ],
  "outputs": [{"name": "h", "type": "[Batch, Time, $out_tag:$hidden]"}],
  "impl": {"primitive": "rnn"}
},
{
  "name": "Connector",
  "doc": "linear projection repairing an encoder/decoder width mismatch",
  "params": [
    {"name": "in_features", "kind": "int", "min": 1},
    {"name": "out_features", "kind": "int", "min": 1},
    {"name": "seed", "kind": "int", "default": 0},
    {"name": "init", "kind": "string", "default": "glorot", "choices": ["glorot", "zeros"]},
    {"name": "lead", "kind": "string-list", "default": ["Batch", "Time"]},
    {"name": "in_tag", "kind": "string", "default": "Encoded"},
    {"name": "out_tag", "kind": "string", "default": "Encoded"}
  ],
  "inputs": [{"name": "x", "type": "[$lead*, $in_tag:$in_features]"}],
  "outputs": [{"name": "y", "type": "[$lead*, $out_tag:$out_features]"}],
  "impl": {"primitive": "linear"}
},
{
  "name": "CsvDataLayer",
  "params": [
    {"name": "path", "kind": "string"},
    {"name": "features", "kind": "string-list"},
    {"name": "label", "kind": "string", "default": ""},
    {"name": "num_classes", "kind": "int", "default": 2, "min": 1},
    {"name": "targets", "kind": "string-list", "default": []},
    {"name": "feature_tag", "kind": "string", "default": "Channel"},
    {"name": "target_tag", "kind": "string", "default": "Channel"},
    {"name": "shuffle", "kind": "bool", "default": false},
    {"name": "repeats", "kind": "bool", "default": true},
    {"name": "batch_size", "kind": "int", "default": 0, "min": 0}
  ],
  "outputs": [
    {"name": "features", "type": "[Batch, $feature_tag:#$features]"},
    {"name": "labels", "type": "[Batch, Label:1]", "when": "label!="},
    {"name": "targets", "type": "[Batch, $target_tag:#$targets]", "when": "targets!=[]"}
  ],
  "impl": {"data_layer": "csv"}
},
{
  "name": "SequenceDataLayer",
  "params": [
    {"name": "path", "kind": "string"},
    {"name": "vocab_size", "kind": "int", "min": 1},
    {"name": "max_len", "kind": "int", "min": 1},
    {"name": "pad_id", "kind": "int", "default": 0, "min": 0},
    {"name": "shuffle", "kind": "bool", "default": false},
    {"name": "repeats", "kind": "bool", "default": true},
    {"name": "batch_size", "kind": "int", "default": 0, "min": 0}
  ],
  "outputs": [
    {"name": "tokens", "type": "[Batch, Time:$max_len]"},
    {"name": "mask", "type": "[Batch, Time:$max_len]"},
    {"name": "labels", "type": "[Batch, Time:$max_len]"}
  ],
  "impl": {"data_layer": "sequence"}
},
{
  "name": "LinearEncoder",
  "doc": "embedding followed by depth layers of linear + tanh",
  "params": [
    {"name": "vocab_size", "kind": "int", "min": 1},
    {"name": "embed_dim", "kind": "int", "min": 1},
    {"name": "hidden", "kind": "int", "min": 1},
    {"name": "depth", "kind": "int", "default": 1, "min": 1},
    {"name": "time_major", "kind": "bool", "default": false},
    {"name": "out_tag", "kind": "string", "default": "Encoded"}
  ],
  "inputs": [{"name": "tokens", "type": "[Batch, Time]"}],
  "outputs": [
    {"name": "encoded", "type": "[Batch, Time, $out_tag:$hidden]", "when": "time_major=false"},
    {"name": "encoded", "type": "[Time, Batch, $out_tag:$hidden]", "when": "time_major=true"}
  ],
  "impl": {"composite": {
    "nodes": [
      {"id": "embed", "class": "EmbeddingLookup", "params": {"vocab_size": "$vocab_size", "dim": "$embed_dim"}},
      {"id": "lin", "class": "Linear", "params": {"in_features": "$embed_dim", "out_features": "$hidden",
        "lead": ["Batch", "Time"], "in_tag": "Embedding", "out_tag": "$out_tag"}},
      {"id": "act", "class": "Tanh", "params": {"features": "$hidden", "lead": ["Batch", "Time"], "tag": "$out_tag"}},
      {"id": "to_time_major", "class": "Transpose", "when": "time_major=true",
        "params": {"input_type": "[Batch, Time, ${out_tag}:${hidden}]", "perm": [1, 0, 2]}}
    ],
    "edges": [
      {"from": "$in.tokens", "to": "embed.ids"},
      {"from": "embed.y", "to": "lin.x"},
      {"from": "lin.y", "to": "act.x"},
      {"from": "act.y", "to": "$repeat.in"},
      {"from": "$repeat.out", "to": "$out.encoded", "when": "time_major=false"},
      {"from": "$repeat.out", "to": "to_time_major.x", "when": "time_major=true"},
      {"from": "to_time_major.y", "to": "$out.encoded", "when": "time_major=true"}
    ],
    "repeat": {
      "count": "$depth-1",
      "nodes": [
        {"id": "block_lin", "class": "Linear", "params": {"in_features": "$hidden", "out_features": "$hidden",
          "lead": ["Batch", "Time"], "in_tag": "$out_tag", "out_tag": "$out_tag"}},
        {"id": "block_act", "class": "Tanh", "params": {"features": "$hidden", "lead": ["Batch", "Time"], "tag": "$out_tag"}}
      ],
      "edges": [{"from": "block_lin.y", "to": "block_act.x"}],
      "entry": "block_lin.x",
      "exit": "block_act.y"
    }
  }}
},
{
  "name": "MlpDecoder",
  "doc": "linear + tanh + linear + log-softmax",
  "params": [
    {"name": "in_features", "kind": "int", "min": 1},
    {"name": "hidden", "kind": "int", "min": 1},
    {"name": "num_classes", "kind": "int", "min": 1},
    {"name": "lead", "kind": "string-list", "default": ["Batch"]},
    {"name": "in_tag", "kind": "string", "default": "Channel"},
    {"name": "out_init", "kind": "string", "default": "glorot", "choices": ["glorot", "zeros"]}
  ],
  "inputs": [{"name": "x", "type": "[$lead*, $in_tag:$in_features]"}],
  "outputs": [{"name": "log_probs", "type": "[$lead*, LogProbs:$num_classes]"}],
  "impl": {"composite": {
    "nodes": [
      {"id": "hidden", "class": "Linear", "params": {"in_features": "$in_features", "out_features": "$hidden",
        "lead": "$lead", "in_tag": "$in_tag"}},
      {"id": "act", "class": "Tanh", "params": {"features": "$hidden", "lead": "$lead"}},
      {"id": "out", "class": "Linear", "params": {"in_features": "$hidden", "out_features": "$num_classes",
        "lead": "$lead", "init": "$out_init"}},
      {"id": "log_softmax", "class": "LogSoftmax", "params": {"features": "$num_classes", "lead": "$lead"}}
    ],
    "edges": [
      {"from": "$in.x", "to": "hidden.x"},
      {"from": "hidden.y", "to": "act.x"},
      {"from": "act.y", "to": "out.x"},
      {"from": "out.y", "to": "log_softmax.x"},
      {"from": "log_softmax.log_probs", "to": "$out.log_probs"}
    ]
  }}
},
{
  "name": "RnnDecoder",
  "doc": "single-layer teacher-forced tanh recurrence, projection, log-softmax",
  "params": [
    {"name": "in_features", "kind": "int", "min": 1},
    {"name": "hidden", "kind": "int", "min": 1},
    {"name": "vocab_size", "kind": "int", "min": 1},
    {"name": "in_tag", "kind": "string", "default": "Encoded"}
  ],
  "inputs": [
    {"name": "encoder_outputs", "type": "[Batch, Time, $in_tag:$in_features]"},
    {"name": "targets", "type": "[Batch, Time]"}
  ],
  "outputs": [{"name": "log_probs", "type": "[Batch, Time, LogProbs:$vocab_size]"}],
  "impl": {"composite": {
    "nodes": [
      {"id": "cell", "class": "RnnCell", "params": {"in_features": "$in_features", "hidden": "$hidden",
        "vocab_size": "$vocab_size", "in_tag": "$in_tag"}},
      {"id": "proj", "class": "Linear", "params": {"in_features": "$hidden", "out_features": "$vocab_size",
        "lead": ["Batch", "Time"]}},
      {"id": "log_softmax", "class": "LogSoftmax", "params": {"features": "$vocab_size", "lead": ["Batch", "Time"]}}
    ],
    "edges": [
      {"from": "$in.encoder_outputs", "to": "cell.x"},
      {"from": "$in.targets", "to": "cell.targets"},
      {"from": "cell.h", "to": "proj.x"},
      {"from": "proj.y", "to": "log_softmax.x"},
      {"from": "log_softmax.log_probs", "to": "$out.log_probs"}
    ]
  }}
}
])json";

/// Names of the shipped descriptors, in registration order.
inline std::vector<std::string> std_descriptor_names() {
  std::vector<std::string> out;
  for (const auto& d : nlohmann::json::parse(kStdDescriptorsJson)) out.push_back(d["name"].get<std::string>());
  return out;
}

inline void register_std_descriptors(Registry& reg) {
  for (const auto& d : nlohmann::json::parse(kStdDescriptorsJson)) reg.register_json(d);
}

/// Frozen std tags (plus `extra_tags_file`) and a registry holding the
/// standard collection.
inline std::shared_ptr<Registry> make_std_registry(const std::string& extra_tags_file = {}) {
  auto reg = std::make_shared<Registry>(make_std_tags(extra_tags_file));
  register_std_descriptors(*reg);
  return reg;
}

enum class TemplateVariant { CtcStyle, SeqStyle };

struct TemplateParams {
  std::string data_path = "tokens.txt";
  std::int64_t vocab_size = 12;
  std::int64_t max_len = 8;
  std::int64_t embed_dim = 8;
  std::int64_t hidden = 16;        // encoder width
  std::int64_t rnn_hidden = 12;    // decoder width in seq_style
  std::int64_t depth = 2;
  std::int64_t seed = 0;
  bool connector = true;           // seq_style only
  bool auto_cast = false;
};

namespace detail {

inline void add_shared_front(Graph& g, const TemplateParams& p) {
  g.add("data", "SequenceDataLayer",
        {{"path", p.data_path}, {"vocab_size", p.vocab_size}, {"max_len", p.max_len}, {"pad_id", std::int64_t{0}}});
  g.add("encoder", "LinearEncoder",
        {{"vocab_size", p.vocab_size}, {"embed_dim", p.embed_dim}, {"hidden", p.hidden}, {"depth", p.depth}});
  g.connect("data.tokens", "encoder.tokens");
}

}  // namespace detail

/// ctc_style: data -> encoder -> decoder -> ctc_loss.
/// seq_style: the same data layer and encoder, then connector ->
/// rnn_decoder -> seq_loss. Without the connector the encoder width must
/// equal the decoder width, or connecting raises DIM_INCOMPATIBLE.
inline Graph build_encoder_decoder_template(std::shared_ptr<const Registry> reg, TemplateVariant variant,
                                            const TemplateParams& p) {
  Graph g(std::move(reg), p.seed);
  detail::add_shared_front(g, p);
  const std::vector<std::string> lead{"Batch", "Time"};
  if (variant == TemplateVariant::CtcStyle) {
    g.add("decoder", "MlpDecoder",
          {{"in_features", p.hidden}, {"hidden", p.hidden}, {"num_classes", p.vocab_size}, {"lead", lead},
           {"in_tag", std::string("Encoded")}});
    g.add("ctc_loss", "NllLoss",
          {{"classes", p.vocab_size}, {"lead", lead}, {"labels_type", std::string("[Batch, Time]")},
           {"ignore_index", std::int64_t{0}}});
    g.connect("encoder.encoded", "decoder.x", p.auto_cast);
    g.connect("decoder.log_probs", "ctc_loss.log_probs");
    g.connect("data.labels", "ctc_loss.labels");
    g.add_sink("ctc_loss.loss");
    return g;
  }
  g.add("rnn_decoder", "RnnDecoder",
        {{"in_features", p.rnn_hidden}, {"hidden", p.rnn_hidden}, {"vocab_size", p.vocab_size}});
  g.add("seq_loss", "NllLoss",
        {{"classes", p.vocab_size}, {"lead", lead}, {"labels_type", std::string("[Batch, Time]")},
         {"ignore_index", std::int64_t{0}}});
  if (p.connector) {
    g.add("connector", "Connector", {{"in_features", p.hidden}, {"out_features", p.rnn_hidden}});
    g.connect("encoder.encoded", "connector.x", p.auto_cast);
    g.connect("connector.y", "rnn_decoder.encoder_outputs");
  } else {
    g.connect("encoder.encoded", "rnn_decoder.encoder_outputs", p.auto_cast);
  }
  g.connect("data.labels", "rnn_decoder.targets");
  g.connect("rnn_decoder.log_probs", "seq_loss.log_probs");
  g.connect("data.labels", "seq_loss.labels");
  g.add_sink("seq_loss.loss");
  return g;
}

}  // namespace nmod
