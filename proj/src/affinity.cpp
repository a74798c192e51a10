#include "cnc/affinity.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "cnc/dataset.hpp"
#include "cnc/error.hpp"

namespace cnc {

void AffinityMatrix::validate() const {
  const std::size_t c = counts.size();
  if (mass.rows() != c || mass.cols() != c) throw DimensionError("affinity matrix must be C x C");
  for (std::size_t l = 0; l < c; ++l) {
    double sum = 0.0;
    for (double v : mass.row(l)) {
      if (!(v >= 0.0 && v <= 1.0)) throw InputError("affinity entry outside [0, 1] in row " + std::to_string(l));
      sum += v;
    }
    if (counts[l] == 0) {
      if (sum != 0.0) throw InputError("empty affinity row " + std::to_string(l) + " carries mass");
    } else if (std::abs(sum - 1.0) > 1e-9) {
      throw InputError("affinity row " + std::to_string(l) + " sums to " + std::to_string(sum));
    }
  }
}

AffinityMatrix AffinityMatrix::from_mass(Matrix mass) {
  AffinityMatrix a;
  a.counts.assign(mass.rows(), 0);
  for (std::size_t l = 0; l < mass.rows(); ++l) {
    double sum = 0.0;
    for (double v : mass.row(l)) sum += v;
    a.counts[l] = sum == 0.0 ? 0 : 1;
  }
  a.mass = std::move(mass);
  a.validate();
  return a;
}

AffinityAccumulator::AffinityAccumulator(std::size_t num_labels)
    : sums_(num_labels, num_labels), counts_(num_labels, 0) {}

void AffinityAccumulator::add(std::span<const double> probs, std::uint32_t label) {
  const std::size_t c = counts_.size();
  if (label >= c) throw LabelError("label " + std::to_string(label) + " out of range for affinity");
  if (probs.size() != c) throw InputError("prediction has " + std::to_string(probs.size()) + " entries, expected " + std::to_string(c));
  double sum = 0.0;
  for (double p : probs) {
    if (!std::isfinite(p) || p < 0.0) throw InputError("prediction entry is not a probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw InputError("prediction vector sums to " + std::to_string(sum));
  auto row = sums_.row(label);
  for (std::size_t i = 0; i < c; ++i) row[i] += probs[i];
  ++counts_[label];
  ++total_;
}

void AffinityAccumulator::add_batch(const Matrix& probs, std::span<const std::uint32_t> labels) {
  if (probs.rows() != labels.size()) throw DimensionError("one label per prediction row required");
  for (std::size_t b = 0; b < probs.rows(); ++b) add(probs.row(b), labels[b]);
}

void AffinityAccumulator::merge(const AffinityAccumulator& other) {
  if (other.counts_.size() != counts_.size()) throw DimensionError("merging accumulators of different size");
  for (std::size_t i = 0; i < sums_.size(); ++i) sums_.data()[i] += other.sums_.data()[i];
  for (std::size_t l = 0; l < counts_.size(); ++l) counts_[l] += other.counts_[l];
  total_ += other.total_;
}

AffinityMatrix AffinityAccumulator::finish() const {
  if (total_ == 0) throw InputError("affinity over an empty dataset");
  AffinityMatrix a;
  a.mass = sums_;
  a.counts = counts_;
  for (std::size_t l = 0; l < counts_.size(); ++l) {
    if (counts_[l] == 0) continue;
    const double inv = 1.0 / static_cast<double>(counts_[l]);
    for (double& v : a.mass.row(l)) v = std::min(1.0, v * inv);
  }
  return a;
}

AffinityMatrix accumulate_affinity(const Matrix& probs, std::span<const std::uint32_t> labels,
                                   std::size_t num_labels) {
  AffinityAccumulator acc(num_labels);
  acc.add_batch(probs, labels);
  return acc.finish();
}

AffinityMatrix accumulate_affinity(const Predictor& predict, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw InputError("affinity over an empty dataset");
  AffinityAccumulator acc(data.num_labels);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    idx.clear();
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    const Matrix probs = predict(data.features.gather_rows(idx));
    acc.add_batch(probs, std::span(data.labels).subspan(start, end - start));
  }
  return acc.finish();
}

double affinity_row_l1(const AffinityMatrix& a, std::size_t p, std::size_t q) {
  if (p >= a.size() || q >= a.size()) throw LabelError("affinity row index out of range");
  if (a.empty_row(p) || a.empty_row(q)) throw InputError("L1 distance involving an empty affinity row");
  double d = 0.0;
  const auto rp = a.mass.row(p);
  const auto rq = a.mass.row(q);
  for (std::size_t i = 0; i < rp.size(); ++i) d += std::abs(rp[i] - rq[i]);
  return d;
}

void write_affinity_csv(std::ostream& out, const AffinityMatrix& a) {
  const auto old_flags = out.flags();
  const auto old_precision = out.precision();
  out << std::setprecision(17);
  for (std::size_t l = 0; l < a.size(); ++l) {
    const auto r = a.mass.row(l);
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i > 0) out << ',';
      out << r[i];
    }
    out << '\n';
  }
  out.flags(old_flags);
  out.precision(old_precision);
}

AffinityMatrix read_affinity_csv(std::istream& in) {
  std::vector<double> values;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        throw ParseError("affinity CSV line " + std::to_string(line_no) + ": bad number '" + cell + "'");
      }
      ++n;
    }
    if (rows == 0) cols = n;
    if (n != cols) throw ParseError("affinity CSV line " + std::to_string(line_no) + ": ragged row");
    ++rows;
  }
  if (rows == 0 || rows != cols) throw ParseError("affinity CSV must be a non-empty square matrix");
  try {
    return AffinityMatrix::from_mass(Matrix(rows, cols, std::move(values)));
  } catch (const InputError& e) {
    throw ParseError(std::string("affinity CSV: ") + e.what());
  }
}

}  // namespace cnc
