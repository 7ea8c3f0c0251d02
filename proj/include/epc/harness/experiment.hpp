#pragma once

// Experiment configuration (JSON) and the Monte Carlo success-ratio runner.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "epc/harness/generators.hpp"
#include "epc/harness/io.hpp"
#include "epc/harness/pipeline.hpp"
#include "json.hpp"

namespace epc::harness {

struct ExperimentConfig {
  /// ex1 | ex1b | ex2 | ex4 | ex_bcd | ex_matmul | custom
  std::string scenario = "ex4";
  ScenarioParams params;
  /// .dten input for the custom scenario.
  std::string tensor_path;
  /// Decomposition rank; 0 takes the generating model's rank.
  Eigen::Index rank = 0;
  std::vector<std::string> pipelines{"flm"};
  int num_trials = 1;
  std::optional<double> snr_db;
  std::uint64_t rng_seed = 1;
  /// random | identity_ones
  std::string init = "random";
  int max_iters = 1000;
  double target_rel_error = 1e-12;
  double delta = -1.0;
  double epsilon = 0.0;
  /// 0 uses the hardware concurrency.
  int threads = 0;
  std::string table_path;
  std::string trials_path;

  void validate() const {
    if (num_trials < 1) throw std::invalid_argument("num_trials must be at least 1");
    if (pipelines.empty()) throw std::invalid_argument("no pipelines given");
    for (const auto& p : pipelines) parse_pipeline(p);
    if (init != "random" && init != "identity_ones")
      throw std::invalid_argument("init must be 'random' or 'identity_ones'");
    if (scenario == "custom" && tensor_path.empty())
      throw std::invalid_argument("custom scenario needs tensor_path");
    if ((scenario == "custom" || scenario == "ex_matmul") && rank < 1)
      throw std::invalid_argument("scenario '" + scenario + "' needs an explicit rank");
    if (max_iters < 1) throw std::invalid_argument("max_iters must be at least 1");
    if (snr_db && std::isnan(*snr_db)) throw std::invalid_argument("snr_db is NaN");
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"scenario", c.scenario},
                     {"size", c.params.size},
                     {"scenario_rank", c.params.rank},
                     {"corr", c.params.corr},
                     {"matmul", {c.params.mm, c.params.mn, c.params.mp}},
                     {"tensor_path", c.tensor_path},
                     {"rank", c.rank},
                     {"pipelines", c.pipelines},
                     {"num_trials", c.num_trials},
                     {"snr_db", c.snr_db ? nlohmann::json(*c.snr_db) : nlohmann::json()},
                     {"rng_seed", c.rng_seed},
                     {"init", c.init},
                     {"max_iters", c.max_iters},
                     {"target_rel_error", c.target_rel_error},
                     {"delta", c.delta},
                     {"epsilon", c.epsilon},
                     {"threads", c.threads},
                     {"table_path", c.table_path},
                     {"trials_path", c.trials_path}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("experiment config must be a JSON object");
  static const std::vector<std::string> known{
      "scenario", "size",     "scenario_rank",    "corr",  "matmul",  "tensor_path", "rank",
      "pipelines", "num_trials", "snr_db",        "rng_seed", "init", "max_iters",
      "target_rel_error", "delta", "epsilon", "threads", "table_path", "trials_path"};
  for (const auto& item : j.items())
    if (std::find(known.begin(), known.end(), item.key()) == known.end())
      throw std::invalid_argument("unknown config key '" + item.key() + "'");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("scenario", c.scenario);
  get("size", c.params.size);
  get("scenario_rank", c.params.rank);
  get("corr", c.params.corr);
  if (j.contains("matmul")) {
    const auto& mm = j.at("matmul");
    if (!mm.is_array() || mm.size() != 3) throw std::invalid_argument("matmul must be [m, n, p]");
    c.params.mm = mm[0].get<Eigen::Index>();
    c.params.mn = mm[1].get<Eigen::Index>();
    c.params.mp = mm[2].get<Eigen::Index>();
  }
  get("tensor_path", c.tensor_path);
  get("rank", c.rank);
  get("pipelines", c.pipelines);
  get("num_trials", c.num_trials);
  if (j.contains("snr_db") && !j.at("snr_db").is_null()) c.snr_db = j.at("snr_db").get<double>();
  get("rng_seed", c.rng_seed);
  get("init", c.init);
  get("max_iters", c.max_iters);
  get("target_rel_error", c.target_rel_error);
  get("delta", c.delta);
  get("epsilon", c.epsilon);
  get("threads", c.threads);
  get("table_path", c.table_path);
  get("trials_path", c.trials_path);
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("malformed config '" + path + "': " + e.what());
  }
  ExperimentConfig c;
  try {
    j.get_to(c);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("bad config value: " + std::string(e.what()));
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

inline const std::vector<double>& success_thresholds() {
  static const std::vector<double> t{1e-4, 1e-5, 1e-6, 1e-8};
  return t;
}

struct TrialOutcome {
  double final_rel_error = std::numeric_limits<double>::quiet_NaN();
  double best_rel_error = std::numeric_limits<double>::quiet_NaN();
  int iterations_to_best = 0;
  int iterations = 0;
  double eta_sq = std::numeric_limits<double>::quiet_NaN();
  bool stalled = false;
  bool failed = false;
  std::string error;
  RunTrace trace;
};

struct PipelineSummary {
  std::string pipeline;
  std::vector<TrialOutcome> trials;
  /// One entry per threshold in success_thresholds().
  std::vector<double> success_ratio;
};

struct MonteCarloResult {
  std::vector<PipelineSummary> pipelines;
};

/// Tensor and initial model of one trial; pure in (cfg, trial).
struct TrialSetup {
  DenseTensor tensor;
  KruskalModel init;
};

inline TrialSetup make_trial(const ExperimentConfig& cfg, int trial) {
  const std::uint64_t seed = trial_seed(cfg.rng_seed, static_cast<std::uint64_t>(trial));
  TrialSetup s;
  Eigen::Index rank = cfg.rank;
  if (cfg.scenario == "custom") {
    s.tensor = read_dten(cfg.tensor_path);
  } else {
    Scenario sc = gen_scenario_tensor(cfg.scenario, seed, cfg.params);
    s.tensor = std::move(sc.tensor);
    if (rank < 1) rank = sc.truth.rank();
  }
  if (cfg.snr_db) s.tensor = add_noise(s.tensor, *cfg.snr_db, splitmix64(seed ^ 0x6e6f697365ULL));
  s.init = cfg.init == "identity_ones" ? init_identity_ones(s.tensor.shape(), rank)
                                       : init_random(s.tensor.shape(), rank, splitmix64(seed + 1));
  return s;
}

inline PipelineOptions pipeline_options(const ExperimentConfig& cfg) {
  PipelineOptions o;
  o.solver.max_iters = cfg.max_iters;
  o.solver.target_rel_error = cfg.target_rel_error;
  o.epc.delta = cfg.delta;
  o.epsilon = cfg.epsilon;
  return o;
}

inline TrialOutcome summarize(const PipelineResult& r) {
  TrialOutcome o;
  o.trace = r.trace;
  o.stalled = r.stalled;
  o.eta_sq = r.model.weights.squaredNorm();
  o.iterations = static_cast<int>(r.trace.size());
  if (!r.trace.empty()) {
    o.final_rel_error = r.trace.back().rel_error;
    o.best_rel_error = std::numeric_limits<double>::infinity();
    for (const auto& rec : r.trace.records())
      if (rec.rel_error < o.best_rel_error) {
        o.best_rel_error = rec.rel_error;
        o.iterations_to_best = rec.iter;
      }
  }
  return o;
}

/// Runs every pipeline on every trial. A trial succeeds at threshold tau when
/// its best relative error is within tau of the reference: 0 for noise-free
/// data, otherwise the lowest error any pipeline reached on that trial.
/// Failed trials count as unsuccessful.
inline MonteCarloResult run_monte_carlo(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<std::vector<Stage>> stages;
  for (const auto& p : cfg.pipelines) stages.push_back(parse_pipeline(p));
  const PipelineOptions popts = pipeline_options(cfg);
  const auto n_trials = static_cast<std::size_t>(cfg.num_trials);

  MonteCarloResult res;
  for (const auto& p : cfg.pipelines) res.pipelines.push_back({p, std::vector<TrialOutcome>(n_trials), {}});

  auto run_trial = [&](std::size_t trial) {
    TrialSetup setup;
    std::string setup_error;
    try {
      setup = make_trial(cfg, static_cast<int>(trial));
    } catch (const std::exception& e) {
      setup_error = e.what();
    }
    for (std::size_t k = 0; k < stages.size(); ++k) {
      TrialOutcome& out = res.pipelines[k].trials[trial];
      if (!setup_error.empty()) {
        out.failed = true;
        out.error = setup_error;
        continue;
      }
      try {
        out = summarize(run_pipeline(setup.tensor, setup.init, stages[k], popts));
      } catch (const std::exception& e) {
        out = TrialOutcome{};
        out.failed = true;
        out.error = e.what();
      }
    }
  };

  unsigned workers = cfg.threads > 0 ? static_cast<unsigned>(cfg.threads)
                                     : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min<unsigned>(workers, static_cast<unsigned>(n_trials));
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < n_trials; i = next++) run_trial(i);
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  const auto& thr = success_thresholds();
  std::vector<double> reference(n_trials, 0.0);
  if (cfg.snr_db) {
    for (std::size_t i = 0; i < n_trials; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& p : res.pipelines)
        if (!p.trials[i].failed && std::isfinite(p.trials[i].best_rel_error))
          best = std::min(best, p.trials[i].best_rel_error);
      reference[i] = std::isfinite(best) ? best : 0.0;
    }
  }
  for (auto& p : res.pipelines) {
    for (double tau : thr) {
      int hits = 0;
      for (std::size_t i = 0; i < n_trials; ++i) {
        const auto& t = p.trials[i];
        if (!t.failed && t.best_rel_error - reference[i] <= tau) ++hits;
      }
      p.success_ratio.push_back(static_cast<double>(hits) / static_cast<double>(n_trials));
    }
  }
  return res;
}

/// pipeline,threshold,success_ratio
inline void write_success_table(std::ostream& os, const MonteCarloResult& r) {
  os << "pipeline,threshold,success_ratio\n";
  const auto& thr = success_thresholds();
  for (const auto& p : r.pipelines)
    for (std::size_t k = 0; k < thr.size(); ++k)
      os << p.pipeline << ',' << thr[k] << ',' << p.success_ratio[k] << '\n';
  if (!os) throw IoError("failed writing success table");
}

/// pipeline,trial,final_rel_error,best_rel_error,iterations_to_best,eta_sq_norm,stalled,failed
inline void write_trial_table(std::ostream& os, const MonteCarloResult& r) {
  os << "pipeline,trial,final_rel_error,best_rel_error,iterations_to_best,eta_sq_norm,stalled,failed\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& p : r.pipelines)
    for (std::size_t i = 0; i < p.trials.size(); ++i) {
      const auto& t = p.trials[i];
      os << p.pipeline << ',' << i << ',' << t.final_rel_error << ',' << t.best_rel_error << ','
         << t.iterations_to_best << ',' << t.eta_sq << ',' << t.stalled << ',' << t.failed << '\n';
    }
  if (!os) throw IoError("failed writing trial table");
}

}  // namespace epc::harness
