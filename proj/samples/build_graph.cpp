// Builds a small encoder/decoder graph in code, shows the connect-time type
// error for a time-major encoder, repairs it with an implicit cast and runs
// a few training steps.
//
//   build/sample_build_graph tests/fixtures/tokens.txt

#include <iostream>

#include "nmod/nmod.hpp"

using namespace nmod;

namespace {

Graph build(const std::shared_ptr<Registry>& reg, const std::string& tokens, bool auto_cast) {
  Graph g(reg, 1);
  g.add("data", "SequenceDataLayer", {{"path", tokens}, {"vocab_size", std::int64_t{12}}, {"max_len", std::int64_t{8}}});
  g.add("encoder", "LinearEncoder", {{"vocab_size", std::int64_t{12}}, {"embed_dim", std::int64_t{8}},
                                     {"hidden", std::int64_t{16}}, {"time_major", true}});
  g.add("decoder", "MlpDecoder", {{"in_features", std::int64_t{16}}, {"hidden", std::int64_t{16}},
                                  {"num_classes", std::int64_t{12}}, {"lead", std::vector<std::string>{"Batch", "Time"}},
                                  {"in_tag", std::string("Encoded")}});
  g.add("loss", "NllLoss", {{"classes", std::int64_t{12}}, {"lead", std::vector<std::string>{"Batch", "Time"}},
                            {"labels_type", std::string("[Batch, Time]")}, {"ignore_index", std::int64_t{0}}});
  g.connect("data.tokens", "encoder.tokens");
  g.connect("encoder.encoded", "decoder.x", auto_cast);
  g.connect("decoder.log_probs", "loss.log_probs");
  g.connect("data.labels", "loss.labels");
  g.add_sink("loss.loss");
  return g;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: " << argv[0] << " TOKENS_FILE\n";
    return 2;
  }
  auto reg = make_std_registry();

  try {
    build(reg, argv[1], false);
  } catch (const TypeMismatch& e) {
    std::cout << "rejected: " << comparison_name(e.result()) << " " << e.producer_type() << " vs "
              << e.consumer_type() << '\n';
  }

  auto g = build(reg, argv[1], true);
  if (auto report = g.validate(); !report.empty()) {
    std::cerr << "graph does not validate\n";
    return 1;
  }
  std::cout << "inserted casts: " << g.cast_count() << "\norder:";
  for (const auto& id : g.topo_order()) std::cout << ' ' << id;
  std::cout << "\nparameters: " << g.parameter_count() << '\n';

  ActionConfig cfg;
  cfg.max_steps = 60;
  cfg.batch_size = 16;
  cfg.optimizer.kind = "adam";
  cfg.optimizer.lr = 0.01;
  auto report = train(g, cfg, {{CallbackKind::LossLog, 20, "-", nullptr, {}, {}}}, {{}, &std::cout});
  std::cout << "final loss " << report.losses.back() << '\n';
}
