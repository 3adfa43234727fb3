#include "swarmfuse/correspond.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>

#include "swarmfuse/errors.hpp"

namespace swarmfuse::correspond {

namespace {

using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<const Matrix>;

void require_feature_map(const char* op, const Tensor& f) {
  if (f.rank() != 4 || f.dim(0) != 1) {
    throw DimensionError(std::string(op) + " expects a [1, K, H, W] feature map, got " + shape_str(f.shape()));
  }
}

}  // namespace

Tensor distance_volume(const Tensor& f_a, const Tensor& f_b) {
  require_feature_map("distance_volume", f_a);
  require_feature_map("distance_volume", f_b);
  if (f_a.dim(1) != f_b.dim(1)) {
    throw DimensionError("distance_volume: feature dims differ, " + shape_str(f_a.shape()) + " vs " +
                         shape_str(f_b.shape()));
  }
  const auto k = static_cast<Eigen::Index>(f_a.dim(1));
  const auto na = static_cast<Eigen::Index>(f_a.dim(2) * f_a.dim(3));
  const auto nb = static_cast<Eigen::Index>(f_b.dim(2) * f_b.dim(3));
  MatrixMap a(f_a.data().data(), k, na);  // columns are cells
  MatrixMap b(f_b.data().data(), k, nb);

  // Explicit loops with a fixed summation order: Eigen's vectorised
  // reductions peel by buffer alignment and are not bit-reproducible.
  std::vector<float> out(static_cast<std::size_t>(na * nb));
  std::vector<float> acc(static_cast<std::size_t>(na));
  for (Eigen::Index j = 0; j < nb; ++j) {
    std::fill(acc.begin(), acc.end(), 0.0f);
    for (Eigen::Index c = 0; c < k; ++c) {
      const float* ra = f_a.data().data() + c * na;
      const float bj = f_b.data()[static_cast<std::size_t>(c * nb + j)];
      for (Eigen::Index i = 0; i < na; ++i) {
        const float diff = ra[i] - bj;
        acc[static_cast<std::size_t>(i)] += diff * diff;
      }
    }
    float* row = out.data() + j * na;
    for (Eigen::Index i = 0; i < na; ++i) row[i] = std::sqrt(acc[static_cast<std::size_t>(i)]);
  }

  return Tensor::make_result({1, static_cast<std::size_t>(nb), f_a.dim(2), f_a.dim(3)}, std::move(out), {f_a, f_b},
                             "distance_volume", [k, na, nb](detail::Node& self) {
                               auto& pa = *self.parents[0];
                               auto& pb = *self.parents[1];
                               MatrixMap a(pa.data.data(), k, na);
                               MatrixMap b(pb.data.data(), k, nb);
                               Eigen::Map<const Matrix> d(self.data.data(), nb, na);
                               Eigen::Map<const Matrix> g(self.grad.data(), nb, na);
                               // coefficient g / d, zero where d == 0
                               Matrix w = (d.array() > 0.0f).select(g.array() / d.array(), 0.0f);
                               // sum_j w_ji (a_i - b_j) and sum_i w_ji (b_j - a_i)
                               Eigen::RowVectorXf wa = Eigen::RowVectorXf::Zero(na);
                               Eigen::VectorXf wb = Eigen::VectorXf::Zero(nb);
                               for (Eigen::Index j = 0; j < nb; ++j) {
                                 for (Eigen::Index i = 0; i < na; ++i) {
                                   wa[i] += w(j, i);
                                   wb[j] += w(j, i);
                                 }
                               }
                               if (pa.requires_grad) {
                                 Eigen::Map<Matrix> ga(pa.grad_buffer(), k, na);
                                 ga.noalias() += a * wa.asDiagonal();
                                 ga.noalias() -= b * w;
                               }
                               if (pb.requires_grad) {
                                 Eigen::Map<Matrix> gb(pb.grad_buffer(), k, nb);
                                 gb.noalias() += b * wb.asDiagonal();
                                 gb.noalias() -= a * w.transpose();
                               }
                             });
}

Tensor no_match_scores(const Tensor& f_a) {
  require_feature_map("no_match_scores", f_a);
  const auto k = static_cast<Eigen::Index>(f_a.dim(1));
  const auto na = static_cast<Eigen::Index>(f_a.dim(2) * f_a.dim(3));
  std::vector<float> out(static_cast<std::size_t>(na), 0.0f);
  for (Eigen::Index c = 0; c < k; ++c) {
    const float* ra = f_a.data().data() + c * na;
    for (Eigen::Index i = 0; i < na; ++i) out[static_cast<std::size_t>(i)] += ra[i] * ra[i];
  }
  for (auto& v : out) v = std::sqrt(v);
  return Tensor::make_result({1, 1, f_a.dim(2), f_a.dim(3)}, std::move(out), {f_a}, "no_match_scores",
                             [k, na](detail::Node& self) {
                               auto& pa = *self.parents[0];
                               MatrixMap a(pa.data.data(), k, na);
                               Eigen::Map<Matrix> ga(pa.grad_buffer(), k, na);
                               for (Eigen::Index i = 0; i < na; ++i) {
                                 const float n = self.data[static_cast<std::size_t>(i)];
                                 if (n > 0.0f) ga.col(i) += a.col(i) * (self.grad[static_cast<std::size_t>(i)] / n);
                               }
                             });
}

namespace {

Tensor arrange(const Tensor& distances, const Tensor& no_match, int grid_b_height, int grid_b_width) {
  if (distances.rank() != 4 || no_match.rank() != 4 || no_match.dim(1) != 1 ||
      distances.dim(1) != static_cast<std::size_t>(grid_b_height * grid_b_width) ||
      distances.dim(2) != no_match.dim(2) || distances.dim(3) != no_match.dim(3)) {
    throw DimensionError("assemble: distances " + shape_str(distances.shape()) + " and no-match " +
                         shape_str(no_match.shape()) + " do not fit a " + std::to_string(grid_b_height) + "x" +
                         std::to_string(grid_b_width) + " B grid");
  }
  std::array<Tensor, 2> parts{distances, no_match};
  return concat(parts, 1);
}

}  // namespace

SimilarityVolume assemble_raw(const Tensor& distances, const Tensor& no_match, int grid_b_height, int grid_b_width) {
  return {arrange(distances, no_match, grid_b_height, grid_b_width), VolumeKind::raw_distance, 0, 1, grid_b_height,
          grid_b_width};
}

SimilarityVolume assemble_and_normalize(const Tensor& distances, const Tensor& no_match, int grid_b_height,
                                        int grid_b_width, float tau) {
  if (!(tau > 0.0f)) throw ConfigError("temperature must be positive");
  Tensor raw = arrange(distances, no_match, grid_b_height, grid_b_width);
  return {softmax(scale(raw, -1.0f / tau), 1), VolumeKind::normalized, 0, 1, grid_b_height, grid_b_width};
}

SimilarityVolume build_volume(const Tensor& f_a, const Tensor& f_b, float tau, int agent_a, int agent_b) {
  auto vol = assemble_and_normalize(distance_volume(f_a, f_b), no_match_scores(f_a), static_cast<int>(f_b.dim(2)),
                                    static_cast<int>(f_b.dim(3)), tau);
  vol.agent_a = agent_a;
  vol.agent_b = agent_b;
  return vol;
}

}  // namespace swarmfuse::correspond
