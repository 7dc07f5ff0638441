#pragma once

#include <Eigen/Core>
#include <Eigen/QR>
#include <stdexcept>
#include <string>
#include <vector>

namespace msborrow {

struct OlsFit {
  Eigen::VectorXd beta;
  double sigma2_hat = 0.0;  // RSS / (n - d)
  double rss = 0.0;
};

// Least squares of y on D via column-pivoted QR. Requires n > d and full
// column rank; on rank deficiency the error names the dependent columns.
inline OlsFit least_squares(const Eigen::MatrixXd& D, const Eigen::VectorXd& y,
                            const std::vector<std::string>& names = {}) {
  const Eigen::Index n = D.rows();
  const Eigen::Index d = D.cols();
  if (y.size() != n) throw std::invalid_argument("ols: y length does not match design rows");
  if (n <= d)
    throw std::invalid_argument("ols: need more rows than columns (n=" + std::to_string(n) +
                                ", d=" + std::to_string(d) + ")");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(D);
  qr.setThreshold(1e-10);
  if (qr.rank() < d) {
    std::string cols;
    const auto& perm = qr.colsPermutation().indices();
    for (Eigen::Index k = qr.rank(); k < d; ++k) {
      const Eigen::Index j = perm[k];
      if (!cols.empty()) cols += ", ";
      cols += (j < static_cast<Eigen::Index>(names.size())) ? names[j] : std::to_string(j);
    }
    throw std::invalid_argument("ols: singular design, dependent columns: " + cols);
  }
  OlsFit fit;
  fit.beta = qr.solve(y);
  fit.rss = (y - D * fit.beta).squaredNorm();
  fit.sigma2_hat = fit.rss / static_cast<double>(n - d);
  return fit;
}

}  // namespace msborrow
