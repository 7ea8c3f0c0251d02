#pragma once

// .dten tensor files, Kruskal models as JSON, and trace CSV output.
//
// .dten layout (little-endian): "DTEN0001", u32 order N, N x u64 extents,
// then prod(extents) float64 values, first index fastest.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "epc/cpd.hpp"
#include "epc/error.hpp"
#include "epc/tensor.hpp"
#include "json.hpp"

namespace epc::harness {

inline constexpr std::array<char, 8> kDtenMagic{'D', 'T', 'E', 'N', '0', '0', '0', '1'};

namespace detail {

template <class U>
void put_le(std::ostream& os, U value) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i)
    bytes[i] = static_cast<char>((value >> (8 * i)) & 0xffU);
  os.write(bytes.data(), bytes.size());
}

template <class U>
U get_le(std::istream& is, const char* what) {
  std::array<unsigned char, sizeof(U)> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), bytes.size()))
    throw IoError(std::string("truncated .dten file while reading ") + what);
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace detail

inline void write_dten(std::ostream& os, const DenseTensor& t) {
  os.write(kDtenMagic.data(), kDtenMagic.size());
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.order()));
  for (auto d : t.shape()) detail::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  for (Eigen::Index i = 0; i < t.data().size(); ++i)
    detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(t.data()[i]));
  if (!os) throw IoError("failed writing tensor data");
}

inline DenseTensor read_dten(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kDtenMagic)
    throw IoError("not a .dten file (bad magic)");
  const auto order = detail::get_le<std::uint32_t>(is, "order");
  if (order == 0 || order > 64) throw IoError("invalid tensor order " + std::to_string(order));
  Shape shape;
  std::uint64_t numel = 1;
  for (std::uint32_t k = 0; k < order; ++k) {
    const auto d = detail::get_le<std::uint64_t>(is, "extents");
    if (d == 0) throw IoError("zero extent in .dten header");
    if (numel > (std::uint64_t{1} << 40) / d) throw IoError(".dten tensor is too large");
    numel *= d;
    shape.push_back(static_cast<std::size_t>(d));
  }
  Vector data(static_cast<Eigen::Index>(numel));
  for (Eigen::Index i = 0; i < data.size(); ++i)
    data[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(is, "values"));
  if (is.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes after .dten data");
  try {
    return DenseTensor(std::move(shape), std::move(data));
  } catch (const std::exception& e) {
    throw IoError(std::string("invalid .dten contents: ") + e.what());
  }
}

inline void write_dten(const std::string& path, const DenseTensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_dten(os, t);
  os.close();
  if (!os) throw IoError("failed writing '" + path + "'");
}

inline DenseTensor read_dten(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  return read_dten(is);
}

/// {"weights": [...], "factors": [[column-major values], ...], "dims": [...]}
inline nlohmann::json model_to_json(const KruskalModel& m) {
  nlohmann::json j;
  j["weights"] = std::vector<double>(m.weights.data(), m.weights.data() + m.weights.size());
  j["dims"] = nlohmann::json::array();
  j["factors"] = nlohmann::json::array();
  for (const auto& f : m.factors) {
    j["dims"].push_back(f.rows());
    j["factors"].push_back(std::vector<double>(f.data(), f.data() + f.size()));
  }
  return j;
}

inline KruskalModel model_from_json(const nlohmann::json& j) {
  try {
    const auto w = j.at("weights").get<std::vector<double>>();
    const auto dims = j.at("dims").get<std::vector<Eigen::Index>>();
    const auto& fs = j.at("factors");
    if (!fs.is_array() || fs.size() != dims.size()) throw IoError("model: factors and dims differ in length");
    const auto rank = static_cast<Eigen::Index>(w.size());
    std::vector<Matrix> factors;
    for (std::size_t n = 0; n < dims.size(); ++n) {
      const auto v = fs[n].get<std::vector<double>>();
      if (dims[n] < 1 || static_cast<Eigen::Index>(v.size()) != dims[n] * rank)
        throw IoError("model: factor " + std::to_string(n) + " has the wrong size");
      factors.push_back(Eigen::Map<const Matrix>(v.data(), dims[n], rank));
    }
    KruskalModel m(Eigen::Map<const Vector>(w.data(), rank), std::move(factors));
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed model file: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw IoError(std::string("invalid model: ") + e.what());
  }
}

inline void write_model(const std::string& path, const KruskalModel& m) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << model_to_json(m).dump(1) << '\n';
  os.close();
  if (!os) throw IoError("failed writing '" + path + "'");
}

inline KruskalModel read_model(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed model file '" + path + "': " + e.what());
  }
  return model_from_json(j);
}

inline constexpr const char* kTraceHeader = "iter,rel_error,eta_sq_norm,mu,lambda,seconds";

inline void write_trace_csv(std::ostream& os, const RunTrace& trace) {
  std::ostringstream buf;
  buf << std::setprecision(std::numeric_limits<double>::max_digits10);
  buf << kTraceHeader << '\n';
  for (const auto& r : trace.records())
    buf << r.iter << ',' << r.rel_error << ',' << r.eta_sq_norm << ',' << r.mu << ',' << r.lambda
        << ',' << r.seconds << '\n';
  os << buf.str();
  if (!os) throw IoError("failed writing trace");
}

inline void write_trace_csv(const std::string& path, const RunTrace& trace) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_trace_csv(os, trace);
  os.close();
  if (!os) throw IoError("failed writing '" + path + "'");
}

}  // namespace epc::harness
