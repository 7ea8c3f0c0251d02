#pragma once

// Algorithm pipelines such as "als:10+flm+epc" or "flm+scep+flm".
//
// Stages are separated by '+'. Each stage is `name` or `name:arg`:
//   als, flm, bals, bsqp  arg = iteration cap
//   acep, scep            arg = correction iteration cap; runs once
//   epc                   arg = acep | scep | both; turns the preceding
//                         fitter (als or flm) into a CPD-with-EPC run

#include <charconv>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "epc/bounded.hpp"
#include "epc/correction.hpp"
#include "epc/cpd.hpp"
#include "epc/tensor.hpp"

namespace epc::harness {

struct Stage {
  enum class Kind { kAls, kFlm, kAcep, kScep, kBals, kBsqp, kCpdEpc };
  Kind kind = Kind::kFlm;
  /// Iteration cap; 0 uses the pipeline default.
  int max_iters = 0;
  FitMethod fit = FitMethod::kFlm;
  CorrectionMethod method = CorrectionMethod::kAcep;
};

inline std::string stage_name(const Stage& s) {
  switch (s.kind) {
    case Stage::Kind::kAls: return "als";
    case Stage::Kind::kFlm: return "flm";
    case Stage::Kind::kAcep: return "acep";
    case Stage::Kind::kScep: return "scep";
    case Stage::Kind::kBals: return "bals";
    case Stage::Kind::kBsqp: return "bsqp";
    case Stage::Kind::kCpdEpc: {
      const std::string fit = s.fit == FitMethod::kAls ? "als" : "flm";
      const std::string m = s.method == CorrectionMethod::kAcep   ? "acep"
                            : s.method == CorrectionMethod::kScep ? "scep"
                                                                  : "both";
      return fit + "+epc:" + m;
    }
  }
  return "?";
}

inline std::vector<Stage> parse_pipeline(std::string_view text) {
  if (text.empty()) throw std::invalid_argument("empty pipeline");
  std::vector<Stage> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t plus = std::min(text.find('+', pos), text.size());
    const std::string_view token = text.substr(pos, plus - pos);
    pos = plus + 1;
    if (token.empty()) throw std::invalid_argument("empty stage in pipeline '" + std::string(text) + "'");
    const std::size_t colon = token.find(':');
    const std::string_view name = token.substr(0, colon);
    const std::string_view arg = colon == std::string_view::npos ? std::string_view{} : token.substr(colon + 1);
    auto count = [&]() {
      if (arg.empty()) return 0;
      int v = 0;
      const auto [p, ec] = std::from_chars(arg.data(), arg.data() + arg.size(), v);
      if (ec != std::errc() || p != arg.data() + arg.size() || v < 1)
        throw std::invalid_argument("bad iteration count in stage '" + std::string(token) + "'");
      return v;
    };
    Stage s;
    if (name == "als" || name == "flm") {
      s.kind = name == "als" ? Stage::Kind::kAls : Stage::Kind::kFlm;
      s.fit = name == "als" ? FitMethod::kAls : FitMethod::kFlm;
      s.max_iters = count();
    } else if (name == "acep" || name == "scep") {
      s.kind = name == "acep" ? Stage::Kind::kAcep : Stage::Kind::kScep;
      s.max_iters = count();
    } else if (name == "bals" || name == "bsqp") {
      s.kind = name == "bals" ? Stage::Kind::kBals : Stage::Kind::kBsqp;
      s.max_iters = count();
    } else if (name == "epc") {
      if (out.empty() || (out.back().kind != Stage::Kind::kAls && out.back().kind != Stage::Kind::kFlm))
        throw std::invalid_argument("'epc' must follow als or flm");
      Stage& fit = out.back();
      fit.kind = Stage::Kind::kCpdEpc;
      if (arg.empty() || arg == "acep")
        fit.method = CorrectionMethod::kAcep;
      else if (arg == "scep")
        fit.method = CorrectionMethod::kScep;
      else if (arg == "both")
        fit.method = CorrectionMethod::kAcepThenScep;
      else
        throw std::invalid_argument("unknown correction '" + std::string(arg) + "'");
      continue;
    } else {
      throw std::invalid_argument("unknown stage '" + std::string(name) + "'");
    }
    out.push_back(s);
  }
  return out;
}

struct PipelineOptions {
  SolverOptions solver;
  EpcConfig epc;
  BoundConfig bound;
  /// Bound for bals/bsqp; <= 0 uses the norm of the incoming rank-1 terms.
  double epsilon = 0.0;
};

struct PipelineResult {
  KruskalModel model;
  RunTrace trace;
  bool stalled = false;
  int corrections = 0;
};

inline PipelineResult run_pipeline(const DenseTensor& t, const KruskalModel& init,
                                   const std::vector<Stage>& stages, const PipelineOptions& opts) {
  if (stages.empty()) throw std::invalid_argument("empty pipeline");
  PipelineResult out;
  out.model = init;
  for (const Stage& s : stages) {
    SolverOptions so = opts.solver;
    if (s.max_iters > 0) so.max_iters = s.max_iters;
    DecompositionResult r;
    switch (s.kind) {
      case Stage::Kind::kAls:
        r = als(t, out.model, so);
        break;
      case Stage::Kind::kFlm:
        r = flm(t, out.model, so);
        break;
      case Stage::Kind::kAcep:
      case Stage::Kind::kScep: {
        EpcConfig c = opts.epc;
        if (s.max_iters > 0) c.max_correction_iters = s.max_iters;
        c.method = s.kind == Stage::Kind::kAcep ? CorrectionMethod::kAcep : CorrectionMethod::kScep;
        r = run_correction(t, out.model, c);
        out.corrections += 1;
        break;
      }
      case Stage::Kind::kBals:
      case Stage::Kind::kBsqp: {
        BoundConfig b = opts.bound;
        b.max_iters = so.max_iters;
        b.target_rel_error = so.target_rel_error;
        b.epsilon = opts.epsilon > 0.0 ? opts.epsilon : normalize(out.model).weights.norm();
        r = s.kind == Stage::Kind::kBals ? bals(t, out.model, b) : bsqp(t, out.model, b);
        break;
      }
      case Stage::Kind::kCpdEpc: {
        EpcConfig c = opts.epc;
        c.method = s.method;
        CpdEpcResult e = cpd_epc(t, out.model, s.fit, so, c);
        out.corrections += e.corrections;
        r = std::move(e);
        break;
      }
    }
    out.model = r.model;
    out.trace.append(r.trace);
    out.trace.regularized = out.trace.regularized || r.trace.regularized;
    out.stalled = r.stalled;
    if (!out.trace.empty() && out.trace.back().rel_error <= so.target_rel_error) break;
  }
  return out;
}

}  // namespace epc::harness
