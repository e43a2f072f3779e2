#pragma once

// Evaluation reports and Cohen's kappa. Class index 0 is hate, 1 is not_hate;
// confusion matrices are indexed [gold][pred].

#include <array>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hsd/corpus.hpp"
#include "hsd/error.hpp"

namespace hsd::metrics {

using Confusion = std::array<std::array<long, 2>, 2>;

inline int index_of(Label l) { return l == Label::hate ? 0 : 1; }

inline Confusion confusion(std::span<const Label> golds, std::span<const Label> preds) {
  if (golds.size() != preds.size())
    throw Error("confusion: " + std::to_string(golds.size()) + " gold labels but " + std::to_string(preds.size()) +
                " predictions");
  Confusion m{};
  for (std::size_t i = 0; i < golds.size(); ++i) ++m[index_of(golds[i])][index_of(preds[i])];
  return m;
}

struct ClassScores {
  double precision = 0, recall = 0, f1 = 0;
  long support = 0;
};

struct EvalReport {
  Confusion matrix{};
  long n = 0;
  double accuracy = 0;
  std::array<ClassScores, 2> per_class{};
  double weighted_precision = 0, weighted_recall = 0, weighted_f1 = 0;
  double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
};

inline EvalReport scores(const Confusion& m) {
  EvalReport r;
  r.matrix = m;
  for (const auto& row : m)
    for (long v : row) {
      if (v < 0) throw Error("confusion matrix has a negative entry");
      r.n += v;
    }
  if (r.n == 0) throw Error("cannot score an empty confusion matrix");
  r.accuracy = static_cast<double>(m[0][0] + m[1][1]) / static_cast<double>(r.n);
  for (int c = 0; c < 2; ++c) {
    const long col = m[0][c] + m[1][c];
    const long row = m[c][0] + m[c][1];
    auto& s = r.per_class[c];
    s.support = row;
    s.precision = col ? static_cast<double>(m[c][c]) / static_cast<double>(col) : 0.0;
    s.recall = row ? static_cast<double>(m[c][c]) / static_cast<double>(row) : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    const double w = static_cast<double>(row) / static_cast<double>(r.n);
    r.weighted_precision += w * s.precision;
    r.weighted_recall += w * s.recall;
    r.weighted_f1 += w * s.f1;
    r.macro_precision += s.precision / 2;
    r.macro_recall += s.recall / 2;
    r.macro_f1 += s.f1 / 2;
  }
  return r;
}

inline EvalReport evaluate(std::span<const Label> golds, std::span<const Label> preds) {
  return scores(confusion(golds, preds));
}

struct AgreementReport {
  double kappa = 0;
  double observed = 0;  // p_o
  double expected = 0;  // p_e
  std::size_t n_items = 0;
};

// Works over any label alphabet; p_e comes from each rater's marginals.
template <typename T>
AgreementReport cohen_kappa(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size())
    throw Error("cohen_kappa: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + " labels");
  if (a.empty()) throw Error("cohen_kappa: no items");
  const double n = static_cast<double>(a.size());
  std::map<T, std::pair<double, double>> marginals;
  double agree = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) ++agree;
    marginals[a[i]].first += 1;
    marginals[b[i]].second += 1;
  }
  AgreementReport r;
  r.n_items = a.size();
  r.observed = agree / n;
  for (const auto& [label, counts] : marginals) r.expected += (counts.first / n) * (counts.second / n);
  if (r.expected >= 1.0)
    r.kappa = r.observed >= 1.0 ? 1.0 : 0.0;
  else
    r.kappa = (r.observed - r.expected) / (1.0 - r.expected);
  return r;
}

inline AgreementReport cohen_kappa(const std::vector<Label>& a, const std::vector<Label>& b) {
  return cohen_kappa<Label>(std::span<const Label>(a), std::span<const Label>(b));
}

// ---------------------------------------------------------------------------
// Rendering

inline std::string fixed2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

inline std::string render_confusion(const Confusion& m) {
  std::ostringstream os;
  os << std::left << std::setw(15) << "gold \\ pred" << std::right << std::setw(10) << "hate" << std::setw(10)
     << "not_hate" << '\n';
  const char* names[] = {"hate", "not_hate"};
  for (int g = 0; g < 2; ++g)
    os << std::left << std::setw(15) << names[g] << std::right << std::setw(10) << m[g][0] << std::setw(10)
       << m[g][1] << '\n';
  return os.str();
}

// Key-value text form, metrics to 2 decimals.
inline std::string render_text(const EvalReport& r) {
  std::ostringstream os;
  os << "n: " << r.n << '\n'
     << "accuracy: " << fixed2(r.accuracy) << '\n'
     << "weighted_recall: " << fixed2(r.weighted_recall) << '\n'
     << "weighted_f1: " << fixed2(r.weighted_f1) << '\n'
     << "macro_f1: " << fixed2(r.macro_f1) << '\n';
  const char* names[] = {"hate", "not_hate"};
  for (int c = 0; c < 2; ++c)
    os << names[c] << ": precision " << fixed2(r.per_class[c].precision) << " recall "
       << fixed2(r.per_class[c].recall) << " f1 " << fixed2(r.per_class[c].f1) << " support "
       << r.per_class[c].support << '\n';
  os << "confusion:\n" << render_confusion(r.matrix);
  return os.str();
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  const char* names[] = {"hate", "not_hate"};
  for (int c = 0; c < 2; ++c)
    per_class[names[c]] = {{"precision", r.per_class[c].precision},
                           {"recall", r.per_class[c].recall},
                           {"f1", r.per_class[c].f1},
                           {"support", r.per_class[c].support}};
  return {{"n", r.n},
          {"confusion", {{r.matrix[0][0], r.matrix[0][1]}, {r.matrix[1][0], r.matrix[1][1]}}},
          {"accuracy", r.accuracy},
          {"weighted", {{"precision", r.weighted_precision}, {"recall", r.weighted_recall}, {"f1", r.weighted_f1}}},
          {"macro", {{"precision", r.macro_precision}, {"recall", r.macro_recall}, {"f1", r.macro_f1}}},
          {"per_class", per_class}};
}

inline nlohmann::json to_json(const AgreementReport& r) {
  return {{"kappa", r.kappa}, {"p_o", r.observed}, {"p_e", r.expected}, {"n_items", r.n_items}};
}

// One row of a results table; a missing report renders as FAILED.
struct TableRow {
  std::string dataset;
  std::string model;
  std::optional<EvalReport> report;
};

inline std::string render_table(const std::vector<TableRow>& rows) {
  std::vector<std::array<std::string, 5>> cells{{"Dataset", "Model", "Accuracy", "Recall", "F1"}};
  for (const auto& r : rows) {
    if (r.report)
      cells.push_back({r.dataset, r.model, fixed2(r.report->accuracy), fixed2(r.report->weighted_recall),
                       fixed2(r.report->weighted_f1)});
    else
      cells.push_back({r.dataset, r.model, "FAILED", "FAILED", "FAILED"});
  }
  std::array<std::size_t, 5> width{};
  for (const auto& row : cells)
    for (std::size_t c = 0; c < 5; ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream os;
  auto line = [&](const std::array<std::string, 5>& row) {
    os << '|';
    for (std::size_t c = 0; c < 5; ++c) os << ' ' << std::left << std::setw(static_cast<int>(width[c])) << row[c] << " |";
    os << '\n';
  };
  line(cells[0]);
  os << '|';
  for (std::size_t c = 0; c < 5; ++c) os << std::string(width[c] + 2, '-') << '|';
  os << '\n';
  for (std::size_t i = 1; i < cells.size(); ++i) line(cells[i]);
  return os.str();
}

}  // namespace hsd::metrics
