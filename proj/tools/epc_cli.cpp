// Command-line front end: generate | decompose | correct | bench.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "epc/bounded.hpp"
#include "epc/correction.hpp"
#include "epc/cpd.hpp"
#include "epc/error.hpp"
#include "epc/harness/experiment.hpp"
#include "epc/harness/generators.hpp"
#include "epc/harness/io.hpp"
#include "epc/harness/pipeline.hpp"

namespace {

using namespace epc;
using namespace epc::harness;

enum Exit { kOk = 0, kBadInput = 2, kStalled = 3, kIo = 4 };

struct GenerateArgs {
  std::string scenario;
  std::string matmul;
  std::uint64_t seed = 1;
  std::optional<double> snr;
  Eigen::Index size = 0;
  Eigen::Index scenario_rank = 0;
  double corr = 0.99;
  std::string out;
  std::string truth_out;
};

struct DecomposeArgs {
  std::string input;
  std::string model_in;
  Eigen::Index rank = 0;
  std::string algo = "flm";
  std::string init = "random";
  std::uint64_t seed = 1;
  int max_iters = 1000;
  int restarts = 1;
  double target = 1e-12;
  std::optional<double> delta;
  std::optional<double> epsilon;
  bool adapt_bound = false;
  std::string out;
  std::string trace;
};

struct BenchArgs {
  std::string config;
  std::string scenario = "ex4";
  std::vector<std::string> algos;
  Eigen::Index rank = 0;
  Eigen::Index size = 0;
  int trials = 10;
  std::optional<double> snr;
  std::uint64_t seed = 1;
  int max_iters = 1000;
  double target = 1e-12;
  std::string init = "random";
  int threads = 0;
  std::string out;
  std::string trials_out;
};

std::vector<Eigen::Index> parse_triple(const std::string& s) {
  std::vector<Eigen::Index> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    long long x = 0;
    try {
      x = std::stoll(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || x < 1) throw std::invalid_argument("--matmul expects m,n,p positive integers");
    v.push_back(static_cast<Eigen::Index>(x));
  }
  if (v.size() != 3) throw std::invalid_argument("--matmul expects m,n,p");
  return v;
}

int do_generate(const GenerateArgs& a) {
  if (a.scenario.empty() == a.matmul.empty())
    throw std::invalid_argument("give exactly one of --scenario or --matmul");
  ScenarioParams params;
  params.size = a.size;
  params.rank = a.scenario_rank;
  params.corr = a.corr;
  std::string id = a.scenario;
  if (!a.matmul.empty()) {
    const auto t = parse_triple(a.matmul);
    params.mm = t[0];
    params.mn = t[1];
    params.mp = t[2];
    id = "ex_matmul";
  }
  Scenario sc = gen_scenario_tensor(id, a.seed, params);
  DenseTensor t = a.snr ? add_noise(sc.tensor, *a.snr, splitmix64(a.seed ^ 0x6e6f697365ULL)) : sc.tensor;
  write_dten(a.out, t);
  if (!a.truth_out.empty()) {
    if (sc.truth.rank() == 0) throw std::invalid_argument("scenario has no generating model");
    write_model(a.truth_out, sc.truth);
  }
  std::cout << "wrote " << a.out << " shape " << shape_to_string(t.shape()) << "\n";
  return kOk;
}

PipelineOptions options_from(const DecomposeArgs& a) {
  PipelineOptions o;
  o.solver.max_iters = a.max_iters;
  o.solver.target_rel_error = a.target;
  if (a.delta) {
    if (!(*a.delta >= 0.0)) throw std::invalid_argument("--delta must be nonnegative");
    o.epc.delta = *a.delta;
  }
  if (a.epsilon) {
    if (!(*a.epsilon > 0.0)) throw std::invalid_argument("--epsilon must be positive");
    o.epsilon = *a.epsilon;
  }
  o.bound.adapt = a.adapt_bound;
  return o;
}

void report(const DenseTensor& t, const PipelineResult& r, int restart) {
  std::cout << "restart " << restart << ": rel_error " << relative_error(t, r.model) << " eta_sq "
            << r.model.weights.squaredNorm() << " iterations " << r.trace.size() << " corrections "
            << r.corrections << (r.stalled ? " (stalled)" : "") << "\n";
}

int finish(const DenseTensor& t, const PipelineResult& best, const DecomposeArgs& a) {
  if (!a.trace.empty()) write_trace_csv(a.trace, best.trace);
  if (!a.out.empty()) write_model(a.out, best.model);
  const double err = relative_error(t, best.model);
  std::cout << "final rel_error " << err << "\n";
  return best.stalled && err > a.target ? kStalled : kOk;
}

int do_decompose(const DecomposeArgs& a) {
  if (a.rank < 1) throw std::invalid_argument("--rank must be at least 1");
  if (a.restarts < 1) throw std::invalid_argument("--restarts must be at least 1");
  if (a.init != "random" && a.init != "identity_ones")
    throw std::invalid_argument("--init must be random or identity_ones");
  const auto stages = parse_pipeline(a.algo);
  const PipelineOptions opts = options_from(a);
  const DenseTensor t = read_dten(a.input);
  std::optional<PipelineResult> best;
  double best_err = std::numeric_limits<double>::infinity();
  for (int k = 0; k < a.restarts; ++k) {
    const KruskalModel init = a.init == "identity_ones"
                                  ? init_identity_ones(t.shape(), a.rank)
                                  : init_random(t.shape(), a.rank, trial_seed(a.seed, static_cast<std::uint64_t>(k)));
    PipelineResult r = run_pipeline(t, init, stages, opts);
    report(t, r, k);
    const double err = relative_error(t, r.model);
    if (err < best_err) {
      best_err = err;
      best = std::move(r);
    }
    if (best_err <= a.target || a.init == "identity_ones") break;
  }
  return finish(t, *best, a);
}

int do_correct(DecomposeArgs a) {
  if (a.model_in.empty()) throw std::invalid_argument("correct needs --model");
  if (a.algo != "acep" && a.algo != "scep" && a.algo != "both")
    throw std::invalid_argument("--algo for correct must be acep, scep or both");
  const DenseTensor t = read_dten(a.input);
  const KruskalModel m = read_model(a.model_in);
  check_compatible(t, m);
  EpcConfig c;
  c.method = a.algo == "acep"   ? CorrectionMethod::kAcep
             : a.algo == "scep" ? CorrectionMethod::kScep
                                : CorrectionMethod::kAcepThenScep;
  c.max_correction_iters = a.max_iters;
  if (a.delta) {
    if (!(*a.delta >= 0.0)) throw std::invalid_argument("--delta must be nonnegative");
    c.delta = *a.delta;
  }
  const double before = normalize(m).weights.squaredNorm();
  const DecompositionResult r = run_correction(t, m, c);
  PipelineResult p{r.model, r.trace, r.stalled, 1};
  std::cout << "eta_sq " << before << " -> " << r.model.weights.squaredNorm() << "\n";
  a.target = -1.0;
  return finish(t, p, a);
}

int do_bench(const BenchArgs& a) {
  ExperimentConfig cfg;
  if (!a.config.empty()) {
    cfg = load_experiment_config(a.config);
  } else {
    cfg.scenario = a.scenario;
    cfg.params.size = a.size;
    cfg.rank = a.rank;
    if (!a.algos.empty()) cfg.pipelines = a.algos;
    cfg.num_trials = a.trials;
    cfg.snr_db = a.snr;
    cfg.rng_seed = a.seed;
    cfg.max_iters = a.max_iters;
    cfg.target_rel_error = a.target;
    cfg.init = a.init;
    cfg.threads = a.threads;
    cfg.table_path = a.out;
    cfg.trials_path.clear();
  }
  if (!a.trials_out.empty()) cfg.trials_path = a.trials_out;
  const MonteCarloResult r = run_monte_carlo(cfg);
  write_success_table(std::cout, r);
  if (!cfg.table_path.empty()) {
    std::ofstream os(cfg.table_path, std::ios::trunc);
    if (!os) throw IoError("cannot open '" + cfg.table_path + "' for writing");
    write_success_table(os, r);
  }
  if (!cfg.trials_path.empty()) {
    std::ofstream os(cfg.trials_path, std::ios::trunc);
    if (!os) throw IoError("cannot open '" + cfg.trials_path + "' for writing");
    write_trial_table(os, r);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CP decomposition with error preserving correction"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "write a benchmark tensor to a .dten file");
  g->add_option("--scenario", gen.scenario, "ex1 | ex1b | ex2 | ex4 | ex_bcd | ex_matmul");
  g->add_option("--matmul", gen.matmul, "m,n,p multiplication tensor");
  g->add_option("--seed", gen.seed, "random seed");
  g->add_option("--snr", gen.snr, "add Gaussian noise at this SNR in dB");
  g->add_option("--size", gen.size, "ex4 size I");
  g->add_option("--scenario-rank", gen.scenario_rank, "ex4 rank R");
  g->add_option("--corr", gen.corr, "ex4 collinearity");
  g->add_option("-o,--out", gen.out, "output .dten file")->required();
  g->add_option("--truth", gen.truth_out, "also write the generating model (JSON)");

  DecomposeArgs dec;
  auto* d = app.add_subcommand("decompose", "fit a rank-R CP model");
  d->add_option("input", dec.input, "input .dten file")->required();
  d->add_option("--rank", dec.rank, "CP rank")->required();
  d->add_option("--algo", dec.algo, "pipeline, e.g. flm, als:10+flm+epc, bsqp");
  d->add_option("--init", dec.init, "random | identity_ones");
  d->add_option("--seed", dec.seed, "random seed for initialization");
  d->add_option("--max-iters", dec.max_iters, "iteration cap per stage");
  d->add_option("--restarts", dec.restarts, "random restarts; the best run is kept");
  d->add_option("--target", dec.target, "stop at this relative error");
  d->add_option("--delta", dec.delta, "error bound for corrections (default: current residual)");
  d->add_option("--epsilon", dec.epsilon, "norm bound for bals/bsqp (default: initial norm)");
  d->add_flag("--adapt-bound", dec.adapt_bound, "grow/shrink epsilon during bals/bsqp");
  d->add_option("-o,--out", dec.out, "write the model (JSON)");
  d->add_option("--trace", dec.trace, "write the trace CSV");

  DecomposeArgs cor;
  cor.algo = "acep";
  cor.max_iters = 500;
  auto* c = app.add_subcommand("correct", "lower the norm of a model's rank-1 terms at fixed error");
  c->add_option("input", cor.input, "input .dten file")->required();
  c->add_option("--model", cor.model_in, "model JSON to correct")->required();
  c->add_option("--algo", cor.algo, "acep | scep | both");
  c->add_option("--delta", cor.delta, "error bound (default: current residual)");
  c->add_option("--max-iters", cor.max_iters, "correction iteration cap");
  c->add_option("-o,--out", cor.out, "write the corrected model (JSON)");
  c->add_option("--trace", cor.trace, "write the trace CSV");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Monte Carlo success ratios");
  b->add_option("--config", bench.config, "experiment config (JSON)");
  b->add_option("--scenario", bench.scenario, "scenario id");
  b->add_option("--algo", bench.algos, "pipeline; repeat to compare several");
  b->add_option("--rank", bench.rank, "CP rank (default: generating rank)");
  b->add_option("--size", bench.size, "ex4 size I");
  b->add_option("--trials", bench.trials, "number of trials");
  b->add_option("--snr", bench.snr, "SNR in dB");
  b->add_option("--seed", bench.seed, "master seed");
  b->add_option("--max-iters", bench.max_iters, "iteration cap per stage");
  b->add_option("--target", bench.target, "stop at this relative error");
  b->add_option("--init", bench.init, "random | identity_ones");
  b->add_option("--threads", bench.threads, "worker threads (0: all cores)");
  b->add_option("-o,--out", bench.out, "success table CSV");
  b->add_option("--trials-out", bench.trials_out, "per-trial CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kBadInput;
  }

  try {
    if (*g) return do_generate(gen);
    if (*d) return do_decompose(dec);
    if (*c) return do_correct(cor);
    if (*b) return do_bench(bench);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kOk;
}
