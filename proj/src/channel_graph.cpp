#include "bstrat/channel_graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Dense>

#include "bstrat/rng.hpp"

namespace bstrat {

void ConnectivityAccumulator::add(const Tensor& attn) {
  if (attn.ndim() != 4) throw std::invalid_argument("ConnectivityAccumulator: need [L, H, C, C]");
  const int L = attn.dim(0), H = attn.dim(1), C = attn.dim(2);
  if (attn.dim(3) != C || L < 1 || H < 1 || C < 1)
    throw std::invalid_argument("ConnectivityAccumulator: bad attention shape");
  if (n_ == 0) sum_ = Tensor({C, C});
  if (sum_.dim(0) != C)
    throw std::invalid_argument("ConnectivityAccumulator: channel count changed between samples");
  for (int i = 0; i < C; ++i)
    for (int j = 0; j < C; ++j) {
      double m = 0.0;
      for (int l = 0; l < L; ++l)
        for (int h = 0; h < H; ++h) m += attn.at(l, h, i, j);
      sum_.at(i, j) += m / (static_cast<double>(L) * H);
    }
  ++n_;
}

Tensor ConnectivityAccumulator::mean() const {
  if (n_ == 0) throw std::logic_error("ConnectivityAccumulator: no samples accumulated");
  Tensor p = sum_;
  for (double& x : p.v) x /= static_cast<double>(n_);
  return p;
}

Tensor accumulate_connectivity(CoarseModel& model, const std::vector<Tensor>& windows) {
  if (windows.empty()) throw std::invalid_argument("accumulate_connectivity: no windows");
  ConnectivityAccumulator acc;
  for (const Tensor& w : windows) {
    CoarsePatchGrid grid = make_patch_grid(w, model.cfg.sample_rate_hz, model.cfg.patch_s);
    ad::Tape t;
    ad::Var tokens = model.tokenize(t, grid);
    CoarseModel::ForwardOut out = model.forward(t, tokens, nullptr, false, nullptr);
    acc.add(out.attn);
  }
  return acc.mean();
}

Tensor normalize_per_channel(const Tensor& p) {
  if (p.ndim() != 2) throw std::invalid_argument("normalize_per_channel: need a matrix");
  const int r = p.dim(0), c = p.dim(1);
  Tensor out({r, c});
  for (int i = 0; i < r; ++i) {
    double lo = p.at(i, 0), hi = p.at(i, 0);
    for (int j = 1; j < c; ++j) {
      lo = std::min(lo, p.at(i, j));
      hi = std::max(hi, p.at(i, j));
    }
    const double span = hi - lo;
    for (int j = 0; j < c; ++j) out.at(i, j) = span > 0.0 ? (p.at(i, j) - lo) / span : 0.0;
  }
  return out;
}

namespace {

// Seeded k-means with k-means++ initialization and restarts; an emptied
// cluster is reseeded with the point farthest from its center.
std::vector<int> kmeans(const Eigen::MatrixXd& x, int k, uint64_t seed) {
  const int n = static_cast<int>(x.rows());
  Rng rng(mix_seed(seed, 0x5c10));
  std::vector<int> best_labels(static_cast<size_t>(n), 0);
  double best_inertia = std::numeric_limits<double>::infinity();

  for (int restart = 0; restart < 10; ++restart) {
    Eigen::MatrixXd centers(k, x.cols());
    // k-means++ seeding
    centers.row(0) = x.row(static_cast<Eigen::Index>(rng.below(static_cast<uint64_t>(n))));
    Eigen::VectorXd d2 = (x.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
      const double total = d2.sum();
      int pick = 0;
      if (total > 0.0) {
        const double r = rng.uniform(0.0, total);
        double run = 0.0;
        for (int i = 0; i < n; ++i) {
          run += d2(i);
          if (run >= r) {
            pick = i;
            break;
          }
        }
      } else {
        pick = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
      }
      centers.row(c) = x.row(pick);
      d2 = d2.cwiseMin((x.rowwise() - centers.row(c)).rowwise().squaredNorm());
    }

    std::vector<int> labels(static_cast<size_t>(n), 0);
    for (int iter = 0; iter < 100; ++iter) {
      bool changed = false;
      for (int i = 0; i < n; ++i) {
        int arg = 0;
        double best = (x.row(i) - centers.row(0)).squaredNorm();
        for (int c = 1; c < k; ++c) {
          const double d = (x.row(i) - centers.row(c)).squaredNorm();
          if (d < best) {
            best = d;
            arg = c;
          }
        }
        if (labels[static_cast<size_t>(i)] != arg) {
          labels[static_cast<size_t>(i)] = arg;
          changed = true;
        }
      }
      // recompute centers; fix empties with the globally farthest point
      Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, x.cols());
      std::vector<int> counts(static_cast<size_t>(k), 0);
      for (int i = 0; i < n; ++i) {
        sums.row(labels[static_cast<size_t>(i)]) += x.row(i);
        ++counts[static_cast<size_t>(labels[static_cast<size_t>(i)])];
      }
      for (int c = 0; c < k; ++c) {
        if (counts[static_cast<size_t>(c)] > 0) {
          centers.row(c) = sums.row(c) / counts[static_cast<size_t>(c)];
        } else {
          int far = 0;
          double far_d = -1.0;
          for (int i = 0; i < n; ++i) {
            const double d =
                (x.row(i) - centers.row(labels[static_cast<size_t>(i)])).squaredNorm();
            if (d > far_d) {
              far_d = d;
              far = i;
            }
          }
          centers.row(c) = x.row(far);
          labels[static_cast<size_t>(far)] = c;
          changed = true;
        }
      }
      if (!changed) break;
    }

    double inertia = 0.0;
    for (int i = 0; i < n; ++i)
      inertia += (x.row(i) - centers.row(labels[static_cast<size_t>(i)])).squaredNorm();
    if (inertia < best_inertia - 1e-12) {
      best_inertia = inertia;
      best_labels = labels;
    }
  }
  return best_labels;
}

}  // namespace

ChannelClustering spectral_cluster(const Tensor& p, int k, uint64_t seed,
                                   std::vector<std::string>* warnings) {
  if (p.ndim() != 2 || p.dim(0) != p.dim(1))
    throw std::invalid_argument("spectral_cluster: connectivity must be square");
  const int C = p.dim(0);
  if (k < 1 || k > C) throw std::invalid_argument("spectral_cluster: need 1 <= k <= C");
  for (double x : p.v)
    if (!std::isfinite(x)) throw std::invalid_argument("spectral_cluster: non-finite entry");

  // symmetrize, clip negatives, drop self-loops
  Eigen::MatrixXd a(C, C);
  for (int i = 0; i < C; ++i)
    for (int j = 0; j < C; ++j)
      a(i, j) = i == j ? 0.0 : std::max(0.0, 0.5 * (p.at(i, j) + p.at(j, i)));

  std::vector<int> isolated, connected;
  for (int i = 0; i < C; ++i) {
    if (a.row(i).sum() <= 1e-12)
      isolated.push_back(i);
    else
      connected.push_back(i);
  }

  ChannelClustering out;
  out.labels.assign(static_cast<size_t>(C), -1);

  const int m = static_cast<int>(connected.size());
  int k_rest = std::min(m, std::max(0, k - static_cast<int>(isolated.size())));
  if (m > 0 && k_rest < 1) k_rest = 1;

  if (!isolated.empty() && warnings != nullptr)
    warnings->push_back("spectral_cluster: " + std::to_string(isolated.size()) +
                        " zero-degree channel(s) assigned their own cluster");

  if (m > 0) {
    Eigen::MatrixXd sub(m, m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) sub(i, j) = a(connected[static_cast<size_t>(i)],
                                                connected[static_cast<size_t>(j)]);
    Eigen::VectorXd deg = sub.rowwise().sum();
    Eigen::VectorXd inv_sqrt = deg.array().sqrt().inverse();
    Eigen::MatrixXd lsym =
        Eigen::MatrixXd::Identity(m, m) -
        inv_sqrt.asDiagonal() * sub * inv_sqrt.asDiagonal();

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(lsym);
    if (eig.info() != Eigen::Success)
      throw std::runtime_error("spectral_cluster: eigendecomposition failed");
    Eigen::MatrixXd embed = eig.eigenvectors().leftCols(k_rest);
    for (int i = 0; i < m; ++i) {
      const double norm = embed.row(i).norm();
      if (norm > 0.0) embed.row(i) /= norm;
    }

    std::vector<int> sub_labels = kmeans(embed, k_rest, seed);
    for (int i = 0; i < m; ++i)
      out.labels[static_cast<size_t>(connected[static_cast<size_t>(i)])] =
          sub_labels[static_cast<size_t>(i)];
  }
  int next = k_rest;
  for (int i : isolated) out.labels[static_cast<size_t>(i)] = next++;
  out.k = next;
  return out;
}

namespace {

std::vector<std::vector<int>> cluster_channel_lists(const ChannelClustering& clustering) {
  std::vector<std::vector<int>> lists(static_cast<size_t>(clustering.k));
  for (size_t c = 0; c < clustering.labels.size(); ++c) {
    const int l = clustering.labels[c];
    if (l < 0 || l >= clustering.k)
      throw std::invalid_argument("select_groups: label outside {0..k-1}");
    lists[static_cast<size_t>(l)].push_back(static_cast<int>(c));
  }
  for (const auto& l : lists)
    if (l.empty()) throw std::invalid_argument("select_groups: empty cluster");
  return lists;
}

std::vector<int> union_channels(const std::vector<std::vector<int>>& lists,
                                const std::vector<int>& clusters) {
  std::vector<int> channels;
  for (int c : clusters)
    channels.insert(channels.end(), lists[static_cast<size_t>(c)].begin(),
                    lists[static_cast<size_t>(c)].end());
  std::sort(channels.begin(), channels.end());
  return channels;
}

}  // namespace

GroupSelection select_groups(const ChannelClustering& clustering, const SubsetProbe& probe,
                             int budget) {
  if (budget < 1) throw std::invalid_argument("select_groups: budget must be positive");
  const auto lists = cluster_channel_lists(clustering);
  const int k = clustering.k;

  // seed with the best-scoring single cluster (ties toward the lower id)
  int best = -1;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < k; ++c) {
    const double s = probe(lists[static_cast<size_t>(c)]);
    if (s > best_score) {
      best_score = s;
      best = c;
    }
  }
  if (static_cast<int>(lists[static_cast<size_t>(best)].size()) > budget)
    throw std::invalid_argument("select_groups: budget smaller than the best single cluster");

  GroupSelection sel;
  sel.clusters = {best};
  sel.channels = lists[static_cast<size_t>(best)];
  sel.score = best_score;

  std::vector<char> used(static_cast<size_t>(k), 0);
  used[static_cast<size_t>(best)] = 1;
  for (;;) {
    int pick = -1;
    double pick_score = sel.score;
    std::vector<int> pick_channels;
    for (int c = 0; c < k; ++c) {
      if (used[static_cast<size_t>(c)]) continue;
      std::vector<int> cand = sel.clusters;
      cand.push_back(c);
      std::vector<int> channels = union_channels(lists, cand);
      if (static_cast<int>(channels.size()) > budget) continue;
      const double s = probe(channels);
      if (s > pick_score) {  // strict: a tie never displaces the earlier (lower-id) candidate
        pick_score = s;
        pick = c;
        pick_channels = std::move(channels);
      }
    }
    if (pick < 0) break;
    used[static_cast<size_t>(pick)] = 1;
    sel.clusters.push_back(pick);
    sel.channels = std::move(pick_channels);
    sel.score = pick_score;
  }
  return sel;
}

GroupSelection select_groups_exhaustive(const ChannelClustering& clustering,
                                        const SubsetProbe& probe, int budget) {
  if (budget < 1) throw std::invalid_argument("select_groups: budget must be positive");
  const auto lists = cluster_channel_lists(clustering);
  const int k = clustering.k;
  if (k > 20) throw std::invalid_argument("select_groups_exhaustive: too many clusters");

  GroupSelection best;
  bool found = false;
  std::vector<int> best_ids;
  for (uint32_t mask = 1; mask < (1u << k); ++mask) {
    std::vector<int> ids;
    for (int c = 0; c < k; ++c)
      if (mask & (1u << c)) ids.push_back(c);
    std::vector<int> channels = union_channels(lists, ids);
    if (static_cast<int>(channels.size()) > budget) continue;
    const double s = probe(channels);
    if (!found || s > best.score || (s == best.score && ids < best_ids)) {
      found = true;
      best.score = s;
      best.clusters = ids;
      best.channels = std::move(channels);
      best_ids = best.clusters;
    }
  }
  if (!found)
    throw std::invalid_argument("select_groups_exhaustive: no cluster subset fits the budget");
  return best;
}

}  // namespace bstrat
