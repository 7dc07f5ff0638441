#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace msborrow {

// One observation: outcome, binary treatment, optional binary compliance,
// source label and covariate vector.
struct Row {
  double y = 0.0;
  int a = 0;
  std::optional<int> c;
  std::string source;
  std::vector<double> x;
};

struct Dataset {
  std::vector<Row> rows;
  std::string primary_label;
  // Order fixes the bit positions of exchangeability patterns.
  std::vector<std::string> supplemental_labels;
  std::vector<std::string> covariate_names;
  bool has_compliance = false;

  std::size_t num_supplemental() const { return supplemental_labels.size(); }
  std::size_t num_covariates() const { return covariate_names.size(); }

  std::vector<std::size_t> rows_for_source(const std::string& label) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (rows[i].source == label) idx.push_back(i);
    return idx;
  }

  std::vector<std::size_t> primary_rows() const { return rows_for_source(primary_label); }

  std::vector<std::size_t> all_rows() const {
    std::vector<std::size_t> idx(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) idx[i] = i;
    return idx;
  }
};

// Column bindings for CSV ingestion. `covariates` lists covariate columns in
// the order they should appear in the dataset; categorical variables must be
// pre-encoded as numeric columns.
struct CsvSchema {
  std::string outcome;
  std::string treatment;
  std::string source;
  std::string primary_label;
  std::optional<std::string> compliance;
  std::vector<std::string> covariates;
  char delimiter = ',';
  // strict (default): any malformed row aborts the load with a row-indexed
  // diagnostic; lenient: malformed rows are dropped and counted.
  bool lenient = false;
  // Optional explicit ordering of supplemental source labels; when empty the
  // order of first appearance in the file is used.
  std::vector<std::string> supplemental_labels;
};

// Checks the Dataset invariants: known sources, per-source positivity at the
// sample level, consistent covariate lengths, binary treatment/compliance.
inline void validate_dataset(const Dataset& ds) {
  if (ds.primary_label.empty()) throw std::invalid_argument("data: primary source label is empty");
  std::map<std::string, std::pair<int, int>> arms;  // source -> (control, treated)
  arms[ds.primary_label];
  for (const auto& s : ds.supplemental_labels) {
    if (s == ds.primary_label)
      throw std::invalid_argument("data: supplemental label equals the primary label: " + s);
    arms[s];
  }
  for (std::size_t i = 0; i < ds.rows.size(); ++i) {
    const Row& r = ds.rows[i];
    auto it = arms.find(r.source);
    if (it == arms.end())
      throw std::invalid_argument("data: row " + std::to_string(i + 1) +
                                  " has undeclared source label '" + r.source + "'");
    if (r.a != 0 && r.a != 1)
      throw std::invalid_argument("data: row " + std::to_string(i + 1) + " has non-binary treatment");
    if (r.c && *r.c != 0 && *r.c != 1)
      throw std::invalid_argument("data: row " + std::to_string(i + 1) + " has non-binary compliance");
    if (ds.has_compliance != r.c.has_value())
      throw std::invalid_argument("data: row " + std::to_string(i + 1) +
                                  " compliance presence disagrees with the dataset");
    if (r.x.size() != ds.covariate_names.size())
      throw std::invalid_argument("data: row " + std::to_string(i + 1) + " has " +
                                  std::to_string(r.x.size()) + " covariates, expected " +
                                  std::to_string(ds.covariate_names.size()));
    if (!std::isfinite(r.y))
      throw std::invalid_argument("data: row " + std::to_string(i + 1) + " has non-finite outcome");
    for (double v : r.x)
      if (!std::isfinite(v))
        throw std::invalid_argument("data: row " + std::to_string(i + 1) + " has non-finite covariate");
    (r.a == 1 ? it->second.second : it->second.first) += 1;
  }
  for (const auto& [label, counts] : arms) {
    if (counts.first == 0 || counts.second == 0)
      throw std::invalid_argument("data: source '" + label +
                                  "' lacks both treatment arms (treated=" +
                                  std::to_string(counts.second) +
                                  ", control=" + std::to_string(counts.first) + ")");
  }
}

namespace detail {

inline std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, delim)) out.push_back(field);
  if (!line.empty() && line.back() == delim) out.emplace_back();
  return out;
}

inline std::string strip(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline bool is_missing(const std::string& field) {
  return field.empty() || field == "NA" || field == "na" || field == "nan" || field == "NaN";
}

inline bool parse_double(const std::string& field, double& out) {
  const char* first = field.data();
  const char* last = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && std::isfinite(out);
}

inline int parse_binary(const std::string& field, const std::string& col, std::size_t row_number) {
  double v;
  if (!parse_double(field, v) || (v != 0.0 && v != 1.0))
    throw std::invalid_argument("data: row " + std::to_string(row_number) + ", column '" + col +
                                "': expected 0 or 1, got '" + field + "'");
  return static_cast<int>(v);
}

}  // namespace detail

struct LoadReport {
  std::size_t rows_dropped = 0;
};

// Reads a delimited text file with a header row into a validated Dataset.
inline Dataset load_dataset(const std::string& path, const CsvSchema& schema,
                            LoadReport* report = nullptr) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("data: cannot open file: " + path);

  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("data: empty file: " + path);
  const auto header = detail::split_line(detail::strip(line), schema.delimiter);

  auto col_index = [&](const std::string& name) -> std::size_t {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (detail::strip(header[i]) == name) return i;
    throw std::invalid_argument("data: missing column '" + name + "' in " + path);
  };

  const std::size_t yi = col_index(schema.outcome);
  const std::size_t ai = col_index(schema.treatment);
  const std::size_t si = col_index(schema.source);
  std::optional<std::size_t> ci;
  if (schema.compliance) ci = col_index(*schema.compliance);
  std::vector<std::size_t> xi;
  xi.reserve(schema.covariates.size());
  for (const auto& name : schema.covariates) xi.push_back(col_index(name));

  Dataset ds;
  ds.primary_label = schema.primary_label;
  ds.covariate_names = schema.covariates;
  ds.has_compliance = schema.compliance.has_value();
  ds.supplemental_labels = schema.supplemental_labels;

  std::size_t dropped = 0;
  std::size_t row_number = 0;  // 1-based index of data rows, excluding the header
  while (std::getline(in, line)) {
    const std::string stripped = detail::strip(line);
    if (stripped.empty()) continue;
    ++row_number;
    const auto fields = detail::split_line(stripped, schema.delimiter);
    try {
      if (fields.size() != header.size())
        throw std::invalid_argument("data: row " + std::to_string(row_number) + " has " +
                                    std::to_string(fields.size()) + " fields, expected " +
                                    std::to_string(header.size()));
      auto get = [&](std::size_t i, const char* what) -> std::string {
        std::string f = detail::strip(fields[i]);
        if (detail::is_missing(f))
          throw std::invalid_argument("data: row " + std::to_string(row_number) +
                                      ": missing value in column '" + detail::strip(header[i]) +
                                      "' (" + what + ")");
        return f;
      };
      Row r;
      const std::string yf = get(yi, "outcome");
      if (!detail::parse_double(yf, r.y))
        throw std::invalid_argument("data: row " + std::to_string(row_number) + ", column '" +
                                    schema.outcome + "': cannot parse '" + yf + "' as a number");
      r.a = detail::parse_binary(get(ai, "treatment"), schema.treatment, row_number);
      if (ci) r.c = detail::parse_binary(get(*ci, "compliance"), *schema.compliance, row_number);
      r.source = get(si, "source");
      r.x.resize(xi.size());
      for (std::size_t k = 0; k < xi.size(); ++k) {
        const std::string xf = get(xi[k], "covariate");
        if (!detail::parse_double(xf, r.x[k]))
          throw std::invalid_argument("data: row " + std::to_string(row_number) + ", column '" +
                                      schema.covariates[k] + "': cannot parse '" + xf +
                                      "' as a number");
      }
      if (r.source != ds.primary_label &&
          std::find(ds.supplemental_labels.begin(), ds.supplemental_labels.end(), r.source) ==
              ds.supplemental_labels.end()) {
        if (!schema.supplemental_labels.empty())
          throw std::invalid_argument("data: row " + std::to_string(row_number) +
                                      ": source '" + r.source + "' is not a declared label");
        ds.supplemental_labels.push_back(r.source);
      }
      ds.rows.push_back(std::move(r));
    } catch (const std::invalid_argument&) {
      if (!schema.lenient) throw;
      ++dropped;
    }
  }

  if (report) report->rows_dropped = dropped;

  bool primary_seen = false;
  for (const auto& r : ds.rows) primary_seen |= (r.source == ds.primary_label);
  if (!primary_seen)
    throw std::invalid_argument("data: primary label '" + ds.primary_label +
                                "' never appears in the source column");
  validate_dataset(ds);
  return ds;
}

// Writes a Dataset back to disk under the same schema bindings, so that
// loading the output reproduces the input.
inline void write_dataset(const Dataset& ds, const std::string& path, const CsvSchema& schema) {
  std::ofstream out(path);
  if (!out) throw std::invalid_argument("data: cannot open file for writing: " + path);
  const char d = schema.delimiter;
  out << schema.outcome << d << schema.treatment;
  if (schema.compliance) out << d << *schema.compliance;
  out << d << schema.source;
  for (const auto& name : schema.covariates) out << d << name;
  out << '\n';
  char buf[64];
  auto fmt = [&](double v) -> std::string {
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
    (void)ec;
    return std::string(buf, p);
  };
  for (const auto& r : ds.rows) {
    out << fmt(r.y) << d << r.a;
    if (schema.compliance) out << d << (r.c ? *r.c : 0);
    out << d << r.source;
    for (double v : r.x) out << d << fmt(v);
    out << '\n';
  }
  if (!out) throw std::runtime_error("data: failed writing " + path);
}

// ---------------------------------------------------------------------------
// Design matrices

enum class ColumnRole {
  Intercept,
  Treatment,
  Compliance,
  Covariate,
  TreatmentInteraction,
  ComplianceInteraction,
};

struct DesignMatrix {
  Eigen::MatrixXd values;
  std::vector<ColumnRole> roles;
  std::vector<std::string> names;
  Eigen::Index treatment_col = -1;
  std::optional<Eigen::Index> compliance_col;

  Eigen::Index cols() const { return values.cols(); }
  Eigen::Index rows() const { return values.rows(); }
};

// Term list for a design matrix. The treatment column is always present;
// interactions are declared explicitly and computed as elementwise products.
struct Formula {
  bool intercept = true;
  bool compliance = false;
  std::vector<std::string> covariates;
  std::vector<std::string> treatment_interactions;
  std::vector<std::string> compliance_interactions;

  // All covariates as main effects, no interactions, no intercept: the
  // predictor layout used by the tree model.
  static Formula predictors(const Dataset& ds, bool with_compliance) {
    Formula f;
    f.intercept = false;
    f.compliance = with_compliance;
    f.covariates = ds.covariate_names;
    return f;
  }
};

// Fixes a counterfactual arm: overrides treatment and/or compliance for every
// generated design row. Interaction columns are recomputed from the
// overridden values.
struct Counterfactual {
  std::optional<int> a;
  std::optional<int> c;
};

inline DesignMatrix build_design(const Dataset& ds, const std::vector<std::size_t>& row_idx,
                                 const Formula& f, const Counterfactual& cf = {}) {
  auto covariate_index = [&](const std::string& name) -> std::size_t {
    for (std::size_t i = 0; i < ds.covariate_names.size(); ++i)
      if (ds.covariate_names[i] == name) return i;
    throw std::invalid_argument("data: unknown covariate '" + name + "' in formula");
  };
  const bool needs_c = f.compliance || !f.compliance_interactions.empty();
  if (needs_c && !ds.has_compliance)
    throw std::invalid_argument("data: formula uses compliance but the dataset has none");

  DesignMatrix dm;
  const auto d = static_cast<Eigen::Index>(
      (f.intercept ? 1 : 0) + 1 + (f.compliance ? 1 : 0) + f.covariates.size() +
      f.treatment_interactions.size() + f.compliance_interactions.size());
  dm.values.resize(static_cast<Eigen::Index>(row_idx.size()), d);
  dm.roles.reserve(d);
  dm.names.reserve(d);

  std::vector<std::size_t> cov_idx, ti_idx, ci_idx;
  for (const auto& n : f.covariates) cov_idx.push_back(covariate_index(n));
  for (const auto& n : f.treatment_interactions) ti_idx.push_back(covariate_index(n));
  for (const auto& n : f.compliance_interactions) ci_idx.push_back(covariate_index(n));

  Eigen::Index col = 0;
  if (f.intercept) {
    dm.roles.push_back(ColumnRole::Intercept);
    dm.names.emplace_back("(intercept)");
    ++col;
  }
  dm.treatment_col = col;
  dm.roles.push_back(ColumnRole::Treatment);
  dm.names.emplace_back("A");
  ++col;
  if (f.compliance) {
    dm.compliance_col = col;
    dm.roles.push_back(ColumnRole::Compliance);
    dm.names.emplace_back("C");
    ++col;
  }
  for (const auto& n : f.covariates) {
    dm.roles.push_back(ColumnRole::Covariate);
    dm.names.push_back(n);
  }
  for (const auto& n : f.treatment_interactions) {
    dm.roles.push_back(ColumnRole::TreatmentInteraction);
    dm.names.push_back("A:" + n);
  }
  for (const auto& n : f.compliance_interactions) {
    dm.roles.push_back(ColumnRole::ComplianceInteraction);
    dm.names.push_back("C:" + n);
  }

  for (std::size_t i = 0; i < row_idx.size(); ++i) {
    if (row_idx[i] >= ds.rows.size())
      throw std::invalid_argument("data: row index out of range in build_design");
    const Row& r = ds.rows[row_idx[i]];
    const double a = cf.a ? static_cast<double>(*cf.a) : static_cast<double>(r.a);
    double c = 0.0;
    if (needs_c) c = cf.c ? static_cast<double>(*cf.c) : static_cast<double>(r.c.value());
    const auto ri = static_cast<Eigen::Index>(i);
    Eigen::Index j = 0;
    if (f.intercept) dm.values(ri, j++) = 1.0;
    dm.values(ri, j++) = a;
    if (f.compliance) dm.values(ri, j++) = c;
    for (std::size_t k : cov_idx) dm.values(ri, j++) = r.x[k];
    for (std::size_t k : ti_idx) dm.values(ri, j++) = a * r.x[k];
    for (std::size_t k : ci_idx) dm.values(ri, j++) = c * r.x[k];
  }
  return dm;
}

// Per-source design matrices, aligned columns by construction. Index 0 is the
// primary source, followed by the supplemental sources in declaration order.
inline std::vector<DesignMatrix> build_design_by_source(const Dataset& ds, const Formula& f) {
  std::vector<DesignMatrix> out;
  out.push_back(build_design(ds, ds.primary_rows(), f));
  for (const auto& label : ds.supplemental_labels)
    out.push_back(build_design(ds, ds.rows_for_source(label), f));
  return out;
}

inline Eigen::VectorXd outcomes(const Dataset& ds, const std::vector<std::size_t>& row_idx) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(row_idx.size()));
  for (std::size_t i = 0; i < row_idx.size(); ++i) y[static_cast<Eigen::Index>(i)] = ds.rows[row_idx[i]].y;
  return y;
}

// ---------------------------------------------------------------------------
// Outcome standardization

// Affine map y -> (y - shift) / scale and its inverse.
struct OutcomeTransform {
  double shift = 0.0;
  double scale = 1.0;

  double apply(double y) const { return (y - shift) / scale; }
  double invert(double z) const { return z * scale + shift; }
};

// Shifts and scales so the sample mean is 0 and the range is exactly 1.
inline std::pair<Eigen::VectorXd, OutcomeTransform> standardize_outcome(const Eigen::VectorXd& y) {
  if (y.size() < 2) throw std::invalid_argument("data: standardize_outcome needs at least 2 values");
  const double lo = y.minCoeff();
  const double hi = y.maxCoeff();
  if (!(hi > lo)) throw std::invalid_argument("data: degenerate outcome (zero range)");
  OutcomeTransform t{y.mean(), hi - lo};
  Eigen::VectorXd z(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) z[i] = t.apply(y[i]);
  return {std::move(z), t};
}

}  // namespace msborrow
