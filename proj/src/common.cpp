#include <cmath>
#ifdef __GLIBC__
#include <malloc.h>
#endif
#include <iostream>
#include <limits>
#include <mutex>
#include <sstream>

#include "gadt3/error.hpp"
#include "gadt3/matrix.hpp"
#include "gadt3/rng.hpp"
#include "gadt3/runtime.hpp"

namespace gadt3 {

namespace {

std::mutex g_warn_mutex;
WarningHandler g_warn_handler = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };

}  // namespace

WarningHandler set_warning_handler(WarningHandler handler) {
  std::lock_guard lock(g_warn_mutex);
  std::swap(handler, g_warn_handler);
  return handler;
}

void warn(std::string_view message) {
  std::lock_guard lock(g_warn_mutex);
  if (g_warn_handler) g_warn_handler(message);
}

std::uint64_t Rng::below(std::uint64_t bound) {
  // Rejection on the top of the range keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return x % bound;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Marsaglia polar method.
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double f = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * f;
  has_spare_ = true;
  return u * f;
}

Rng Rng::fork(std::uint64_t salt) {
  // splitmix64 finalizer over (draw ^ salt).
  std::uint64_t z = engine_() ^ (salt * 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return Rng(z ^ (z >> 31));
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows_list) {
  Matrix m;
  m.rows = rows_list.size();
  m.cols = m.rows ? rows_list.begin()->size() : 0;
  m.data.reserve(m.rows * m.cols);
  for (const auto& r : rows_list) {
    if (r.size() != m.cols) throw UsageError("Matrix::from_rows: ragged rows");
    m.data.insert(m.data.end(), r.begin(), r.end());
  }
  return m;
}

Matrix Matrix::column(std::span<const double> values) {
  Matrix m(values.size(), 1);
  std::copy(values.begin(), values.end(), m.data.begin());
  return m;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

std::string Matrix::shape_string() const {
  std::ostringstream os;
  os << rows << "x" << cols;
  return os.str();
}

bool all_finite(const Matrix& m) {
  for (double v : m.data)
    if (!std::isfinite(v)) return false;
  return true;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) return std::numeric_limits<double>::infinity();
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data[i] - b.data[i]));
  return d;
}

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace gadt3
