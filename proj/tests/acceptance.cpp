// Acceptance runner: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "generators.hpp"
#include "nmod/cli.hpp"

using namespace nmod;
using testutil::fixture;

namespace {

// Tolerances and time limits.
constexpr double kGradEps = 1e-3;
constexpr double kGradTol = 1e-4;
constexpr double kAccumTol = 1e-6;
constexpr double kResumeTol = 1e-6;
constexpr double kBlobsLoss = 0.1;
constexpr double kLogFourTol = 1e-5;
constexpr int kLatticePairs = 10000;
constexpr int kGradGraphs = 50;

// Collects failed checks for one criterion.
struct Check {
  std::vector<std::string> failures;
  std::string detail;
  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
};

const std::vector<std::string> kValidFixtures{"ctc_style", "seq_style", "blobs_mlp", "linreg", "k4_eval"};
const std::vector<std::string> kFindingFixtures{"dim_mismatch", "transposed", "unbound", "cycle"};

FileOptions opts(bool auto_cast, bool collect) {
  FileOptions o;
  o.auto_cast = auto_cast;
  o.collect = collect;
  return o;
}

RunContext ctx_of(const GraphFile& gf) { return RunContext{gf.base_dir, nullptr}; }

std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

void ac1(Check& c) {
  auto h = make_std_tags();
  const std::vector<std::tuple<std::string, std::string, Comparison>> rows = {
      {"[Batch, Channel]", "[Batch, Spectrogram]", Comparison::Greater},
      {"[Batch, Spectrogram]", "[Batch, Channel]", Comparison::Less},
      {"[Batch, Spectrogram]", "[Batch, Encoded]", Comparison::Incompatible},
      {"[Batch, Spectrogram]", "[Spectrogram, Batch]", Comparison::TransposeSame},
      {"[Batch, Spectrogram:64]", "[Batch, Channel:40]", Comparison::DimIncompatible},
      {"[Batch, Spectrogram:64]", "root", Comparison::Same},
  };
  int ok = 0;
  for (const auto& [p, q, want] : rows) {
    auto got = compare_types(*h, parse_type_expr(*h, p), parse_type_expr(*h, q));
    c.expect(got == want, p + " vs " + q + " gave " + std::string(comparison_name(got)));
    ok += got == want;
  }
  c.detail = std::to_string(ok) + "/6 rows";
}

void ac2(Check& c) {
  try {
    load_graph_file(fixture("transposed.json"));
    c.expect(false, "transposed fixture connected without error");
  } catch (const TypeMismatch& e) {
    c.expect(e.result() == Comparison::TransposeSame, "result " + std::string(comparison_name(e.result())));
  }
  auto gf = load_graph_file(fixture("transposed.json"), opts(true, false));
  c.expect(gf.valid, "auto-cast graph did not validate");
  c.expect(gf.graph->cast_count() == 1, "cast count " + std::to_string(gf.graph->cast_count()));
  if (!gf.valid) return;
  Program p(*gf.graph);
  auto feeds = detail::Feeds::load(*gf.graph, gf.base_dir);
  auto tape = forward(p, feeds.pass_batch(0, 5));
  const auto& in = tape.at({"encoder", "encoded"});
  const auto& out = tape.at({"cast_decoder_x", "y"});
  // manual [T, B, C] -> [B, T, C]
  const auto T = in.dim(0), B = in.dim(1), C = in.dim(2);
  bool shape_ok = out.shape() == Shape{B, T, C};
  c.expect(shape_ok, "cast output shape " + render_shape(out.shape()));
  std::size_t mismatched = 0;
  if (shape_ok) {
    for (std::int64_t t = 0; t < T; ++t)
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t k = 0; k < C; ++k) {
          float x = in[(t * B + b) * C + k], y = out[(b * T + t) * C + k];
          mismatched += std::memcmp(&x, &y, sizeof x) != 0;
        }
  }
  c.expect(mismatched == 0, std::to_string(mismatched) + " elements differ from manual transpose");
  c.detail = "cast " + render_shape(in.shape()) + " -> " + render_shape(out.shape()) + ", bitwise equal";
}

void ac3(Check& c) {
  std::mt19937_64 rng(20240917);
  int pairs = 0, violations = 0;
  auto law = [&](bool ok, const std::string& what) {
    if (!ok && ++violations <= 5) c.failures.push_back(what);
  };
  while (pairs < kLatticePairs) {
    testgen::RandomWorld w(rng);
    for (int k = 0; k < 60; ++k, ++pairs) {
      bool dims = rng() % 2;
      auto a = w.type(rng, dims);
      auto b = (rng() % 2) ? w.relative(rng, a, dims) : w.type(rng, dims);
      auto ab = compare_types(w.h, a, b);
      auto ba = compare_types(w.h, b, a);
      const auto pair = render_type(a) + " vs " + render_type(b);
      law(ab == testgen::oracle_compare(w.h, a, b), "oracle: " + pair);
      law(compare_types(w.h, a, a) == Comparison::Same, "reflexivity: " + render_type(a));
      if (ab == Comparison::TransposeSame) law(ba == Comparison::TransposeSame, "transpose symmetry: " + pair);
      if (ab == Comparison::Less && a != b && !dims) law(ba == Comparison::Greater, "subtype asymmetry: " + pair);
      if (a.is_tensor() && b.is_tensor() && a.rank() != b.rank())
        law(ab == Comparison::Incompatible, "rank mismatch: " + pair);
    }
  }
  c.detail = std::to_string(pairs) + " pairs, " + std::to_string(violations) + " violations";
}

void ac4(Check& c) {
  const auto before = kernel_invocations();
  for (const auto& name : kValidFixtures) {
    for (bool cast : {false, true}) {
      auto gf = load_graph_file(fixture(name + ".json"), opts(cast, true));
      gf.graph->validate();
      Program p(*gf.graph);
    }
  }
  for (const auto& name : kFindingFixtures) {
    for (bool cast : {false, true}) load_graph_file(fixture(name + ".json"), opts(cast, true)).graph->validate();
  }
  const auto after_build = kernel_invocations() - before;
  c.expect(after_build == 0, std::to_string(after_build) + " kernel calls before any action");
  auto gf = load_graph_file(fixture("k4_eval.json"));
  evaluate(*gf.graph, *gf.action, ctx_of(gf));
  const auto after_action = kernel_invocations() - before;
  c.expect(after_action > 0, "eval ran no kernels");
  c.detail = "counter " + std::to_string(after_build) + " after build, " + std::to_string(after_action) +
             " after eval";
}

void ac5(Check& c) {
  double worst = 0.0;
  std::size_t masked = 0, params = 0, checked = 0;
  for (int s = 0; s < kGradGraphs; ++s) {
    auto rc = testgen::random_case(1000 + s);
    if (!rc.valid) {
      c.expect(false, "case " + std::to_string(s) + " invalid");
      continue;
    }
    params = std::max(params, rc.graph.parameter_count());
    Program p(rc.graph);
    auto report = grad_check(p, rc.batch, kGradEps, kGradTol);
    c.expect(report.passed, "case " + std::to_string(s) + " (" + rc.shape + ") rel " + fmt(report.max_rel_error));
    worst = std::max(worst, report.max_rel_error);
    masked += report.masked;
    for (const auto& e : report.entries) checked += e.checked;
  }
  c.expect(params <= 10000, "graph with " + std::to_string(params) + " parameters");
  c.detail = std::to_string(kGradGraphs) + " graphs, worst rel " + fmt(worst) + " (tol " + fmt(kGradTol) + "), " +
             std::to_string(checked) + " elements, " + std::to_string(masked) + " masked";
}

std::vector<Checkpoint> trajectory(const std::string& kind, std::int64_t batch, std::int64_t accum, Check& c) {
  auto gf = load_graph_file(fixture("blobs_mlp.json"));
  auto dir = testutil::temp_dir("acc_" + kind + std::to_string(accum));
  ActionConfig cfg;
  cfg.max_steps = 100;
  cfg.batch_size = batch;
  cfg.accumulation_steps = accum;
  cfg.optimizer.kind = kind;
  cfg.optimizer.lr = kind == "sgd" ? 0.1 : 0.01;
  if (kind == "sgd") cfg.optimizer.momentum = 0.9;
  Callback cb{CallbackKind::Checkpoint, 1, (dir / "{step}.ckpt").string(), nullptr, {}, {}};
  auto report = train(*gf.graph, cfg, {cb}, ctx_of(gf));
  std::vector<Checkpoint> out;
  for (const auto& ev : report.events) {
    c.expect(ev.ok, ev.payload);
    if (ev.ok) out.push_back(load_checkpoint(ev.payload));
  }
  return out;
}

void ac6(Check& c) {
  for (const std::string kind : {"sgd", "adam"}) {
    auto big = trajectory(kind, 32, 1, c);
    auto micro = trajectory(kind, 8, 4, c);
    c.expect(big.size() == 100 && micro.size() == 100, kind + " trajectory length");
    double worst = 0.0;
    for (std::size_t s = 0; s < std::min(big.size(), micro.size()); ++s)
      for (const auto& [key, t] : big[s].params) {
        const auto& u = micro[s].params.at(key);
        for (std::size_t i = 0; i < t.numel(); ++i) worst = std::max(worst, std::abs(double(t[i]) - double(u[i])));
      }
    c.expect(worst <= kAccumTol, kind + " max diff " + fmt(worst));
    c.detail += (c.detail.empty() ? "" : ", ") + kind + " max diff " + fmt(worst);
  }
}

void ac7(Check& c) {
  auto reg = make_std_registry();
  TemplateParams p;
  p.data_path = fixture("tokens.txt").string();
  auto ctc = build_encoder_decoder_template(reg, TemplateVariant::CtcStyle, p);
  auto seq = build_encoder_decoder_template(reg, TemplateVariant::SeqStyle, p);
  c.expect(ctc.validate().empty(), "ctc_style invalid");
  c.expect(seq.validate().empty(), "seq_style invalid");
  for (const char* id : {"data", "encoder"}) {
    const auto& a = ctc.instance(id);
    const auto& b = seq.instance(id);
    c.expect(a.descriptor == b.descriptor, std::string(id) + " descriptor differs");
    c.expect(params_to_json(a.params) == params_to_json(b.params), std::string(id) + " params differ");
    bool same_state = a.state.size() == b.state.size();
    for (const auto& [k, t] : a.state) same_state = same_state && b.state.count(k) && t.identical(b.state.at(k));
    c.expect(same_state, std::string(id) + " state differs");
  }
  auto no_conn = p;
  no_conn.connector = false;
  std::string without = "no error";
  try {
    build_encoder_decoder_template(reg, TemplateVariant::SeqStyle, no_conn);
  } catch (const TypeMismatch& e) {
    without = comparison_name(e.result());
  }
  c.expect(without == "DIM_INCOMPATIBLE", "without connector: " + without);
  ActionConfig cfg;
  cfg.max_steps = 30;
  cfg.batch_size = 8;
  cfg.optimizer.kind = "adam";
  cfg.optimizer.lr = 0.01;
  auto report = train(seq, cfg);
  bool trained = report.losses.size() == 30 && report.losses.back() < report.losses.front();
  c.expect(trained, "seq_style did not train");
  c.detail = "shared data/encoder, without connector " + without + ", seq_style loss " +
             (report.losses.empty() ? std::string("-") : fmt(report.losses.front()) + " -> " + fmt(report.losses.back()));
}

void ac8(Check& c) {
  auto blobs = load_graph_file(fixture("blobs_mlp.json"));
  auto r = train(*blobs.graph, *blobs.action, {}, ctx_of(blobs));
  c.expect(r.losses.size() == 500, "blobs ran " + std::to_string(r.losses.size()) + " steps");
  bool below = std::any_of(r.losses.begin(), r.losses.end(), [](double l) { return l < kBlobsLoss; });
  c.expect(below && !r.losses.empty() && r.losses.back() < kBlobsLoss,
           "blobs final loss " + (r.losses.empty() ? std::string("-") : fmt(r.losses.back())));
  auto lin = load_graph_file(fixture("linreg.json"));
  auto l = train(*lin.graph, *lin.action, {}, ctx_of(lin));
  c.expect(l.losses.size() >= 50, "linreg ran " + std::to_string(l.losses.size()) + " steps");
  int rises = 0;
  for (std::size_t i = 1; i < std::min<std::size_t>(50, l.losses.size()); ++i) rises += !(l.losses[i] < l.losses[i - 1]);
  c.expect(rises == 0, std::to_string(rises) + " non-decreasing linreg steps");
  c.detail = "blobs final " + (r.losses.empty() ? std::string("-") : fmt(r.losses.back())) + " (< " + fmt(kBlobsLoss) +
             "), linreg " + std::to_string(rises) + " rises in 50 steps";
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void ac9(Check& c) {
  auto dir = testutil::temp_dir("acceptance_ckpt");
  auto gf = load_graph_file(fixture("seq_style.json"));
  auto cfg = *gf.action;
  cfg.max_steps = 3;
  train(*gf.graph, cfg, {{CallbackKind::Checkpoint, 3, (dir / "a.ckpt").string(), nullptr, {}, {}}}, ctx_of(gf));
  auto ck = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(ck, dir / "b.ckpt");
  c.expect(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"), "checkpoint bytes differ after reload");
  c.expect(decode_checkpoint(encode_checkpoint(ck)) == ck, "checkpoint decode mismatch");

  double worst = 0.0;
  for (const std::string kind : {"sgd", "adam"}) {
    ActionConfig rc;
    rc.max_steps = 200;
    rc.batch_size = 16;
    rc.optimizer.kind = kind;
    rc.optimizer.lr = kind == "sgd" ? 0.1 : 0.01;
    if (kind == "sgd") rc.optimizer.momentum = 0.9;
    auto full = load_graph_file(fixture("blobs_mlp.json"));
    auto whole = train(*full.graph, rc, {}, ctx_of(full));
    auto first = load_graph_file(fixture("blobs_mlp.json"));
    auto half = rc;
    half.max_steps = 100;
    auto path = (dir / (kind + ".ckpt")).string();
    train(*first.graph, half, {{CallbackKind::Checkpoint, 100, path, nullptr, {}, {}}}, ctx_of(first));
    auto resume = load_checkpoint(path);
    auto second = load_graph_file(fixture("blobs_mlp.json"));
    auto rest = train(*second.graph, rc, {}, ctx_of(second), &resume);
    c.expect(rest.losses.size() == 100, kind + " resumed run length");
    for (std::size_t i = 0; i < rest.losses.size() && i + 100 < whole.losses.size(); ++i)
      worst = std::max(worst, std::abs(rest.losses[i] - whole.losses[100 + i]));
    c.expect(rest.param_hash == whole.param_hash, kind + " final parameters differ");
  }
  c.expect(worst <= kResumeTol, "resume loss diff " + fmt(worst));

  int iso = 0;
  for (const auto& name : kValidFixtures) {
    auto g = load_graph_file(fixture(name + ".json"));
    auto doc = save_graph(*g.graph);
    auto back = load_graph(doc, g.registry);
    bool same = save_graph(back) == doc && back.instances().size() == g.graph->instances().size() &&
                back.bindings().size() == g.graph->bindings().size() && back.validate().empty();
    for (const auto& [id, inst] : g.graph->instances()) {
      same = same && back.contains(id);
      for (const auto& [k, t] : inst.state) same = same && back.instance(id).state.at(k).identical(t);
    }
    c.expect(same, name + " save/load not isomorphic");
    iso += same;
  }
  c.detail = "checkpoint bitwise, resume max diff " + fmt(worst) + ", " + std::to_string(iso) + "/" +
             std::to_string(kValidFixtures.size()) + " fixtures isomorphic";
}

struct CliResult {
  int code;
  std::string out;
};

CliResult cli_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  int code = cli::run(args, out, err);
  return {code, out.str()};
}

void ac10(Check& c) {
  auto t = cli_run({"check", fixture("transposed.json").string()});
  c.expect(t.code == 1 && t.out ==
                              "ERROR TRANSPOSE_SAME at encoder.encoded -> decoder.x: [Time, Batch, Encoded:16] vs "
                              "[Batch, Time, Encoded:16]\n",
           "transposed golden: " + t.out);
  auto d = cli_run({"check", fixture("dim_mismatch.json").string()});
  c.expect(d.code == 1 && d.out ==
                              "ERROR DIM_INCOMPATIBLE at encoder.encoded -> rnn_decoder.encoder_outputs: "
                              "[Batch, Time, Encoded:16] vs [Batch, Time, Encoded:12]\n",
           "dim_mismatch golden: " + d.out);
  const std::vector<std::pair<std::string, int>> matrix{
      {"ctc_style", 0}, {"transposed", 1}, {"dim_mismatch", 1}, {"unbound", 1},       {"cycle", 1},
      {"empty", 2},     {"syntax_error", 2}, {"bad_port", 2},   {"unknown_class", 2}, {"missing_param", 2}};
  for (const auto& [name, want] : matrix) {
    auto r = cli_run({"check", fixture(name + ".json").string()});
    c.expect(r.code == want, name + " exit " + std::to_string(r.code));
  }
  c.expect(cli_run({"check", fixture("transposed.json").string(), "--auto-cast"}).code == 0, "auto-cast exit");
  c.expect(cli_run({"check", fixture("ctc_style.json").string(), "--no-such-flag"}).code == 2, "unknown flag exit");
  auto e = cli_run({"eval", fixture("k4_eval.json").string()});
  double loss = std::nan("");
  if (auto at = e.out.find("loss="); at != std::string::npos) loss = std::stod(e.out.substr(at + 5));
  c.expect(e.code == 0 && std::abs(loss - std::log(4.0)) <= kLogFourTol, "eval printed " + e.out);
  c.detail = "goldens match, exit matrix covered, eval loss=" + fmt(loss);
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    double limit_s;
    std::function<void(Check&)> run;
  };
  const std::vector<Criterion> criteria{
      {"AC1 comparison table", 1, ac1},         {"AC2 transpose scenario", 1, ac2},
      {"AC3 lattice properties", 30, ac3},      {"AC4 laziness", 1, ac4},
      {"AC5 gradient check", 120, ac5},         {"AC6 accumulation equivalence", 60, ac6},
      {"AC7 module re-use", 60, ac7},           {"AC8 desk-scale training", 60, ac8},
      {"AC9 persistence", 60, ac9},             {"AC10 cli contract", 30, ac10},
  };
  int failed = 0;
  for (const auto& cr : criteria) {
    Check c;
    auto start = std::chrono::steady_clock::now();
    try {
      cr.run(c);
    } catch (const std::exception& e) {
      c.failures.push_back(std::string("exception: ") + e.what());
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (secs > cr.limit_s) c.failures.push_back("took " + fmt(secs) + "s");
    const bool ok = c.failures.empty();
    failed += !ok;
    std::cout << (ok ? "PASS " : "FAIL ") << cr.name << ": " << c.detail << " [" << std::fixed
              << std::setprecision(2) << secs << "s / " << std::setprecision(0) << cr.limit_s << "s]"
              << std::defaultfloat << std::setprecision(6) << '\n';
    for (const auto& f : c.failures) std::cout << "    " << f << '\n';
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << '\n';
  return failed;
}
