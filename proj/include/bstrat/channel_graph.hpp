#pragma once
// Channel connectivity and functional grouping: aggregates the coarse
// model's spatial attention into a channel-connectivity matrix, clusters
// channels spectrally, and selects clusters by downstream probe score.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bstrat/coarse_model.hpp"
#include "bstrat/tensor.hpp"

namespace bstrat {

// Running mean over samples of the per-sample [layer, head]-averaged spatial
// attention.  Feeding samples one at a time matches the batch mean up to
// floating-point associativity.
class ConnectivityAccumulator {
 public:
  // attn: [layers, heads, C, C] from one window's forward pass
  void add(const Tensor& attn);
  Tensor mean() const;  // P [C, C]; throws when no samples were added
  int64_t count() const { return n_; }

 private:
  Tensor sum_;
  int64_t n_ = 0;
};

// Runs the model on each [C, T] window (eval mode) and returns the mean
// connectivity.  Throws on an empty window list.
Tensor accumulate_connectivity(CoarseModel& model, const std::vector<Tensor>& windows);

// Row-wise min-max scaling to [0, 1]; a constant row maps to all zeros.
Tensor normalize_per_channel(const Tensor& p);

struct ChannelClustering {
  std::vector<int> labels;  // [C], values in {0..k-1}
  int k = 0;                // clusters actually produced (every one non-empty)
};

// Spectral clustering of the symmetrized affinity (P + P^T)/2 with negatives
// clipped to zero and self-loops ignored: normalized Laplacian embedding in
// the k smallest eigenvectors, row-normalized, then seeded k-means restarts.
// Zero-degree channels are split off as their own clusters (with a warning)
// and the rest are clustered into the remaining budget.
ChannelClustering spectral_cluster(const Tensor& p, int k, uint64_t seed = 0,
                                   std::vector<std::string>* warnings = nullptr);

// Validation score for a candidate channel subset (sorted ascending indices).
using SubsetProbe = std::function<double(const std::vector<int>&)>;

struct GroupSelection {
  std::vector<int> clusters;  // chosen cluster ids, in selection order
  std::vector<int> channels;  // union of their channels, sorted
  double score = 0.0;         // probe score of the final union
};

// Greedy forward selection: seed with the best-scoring single cluster (ties
// break toward the lower id), then keep adding the cluster that most improves
// the probe score while the union stays within `budget` channels.  Throws
// when the best single cluster alone exceeds the budget.
GroupSelection select_groups(const ChannelClustering& clustering, const SubsetProbe& probe,
                             int budget);

// Exhaustive search over all cluster subsets within the budget (oracle for
// small k; throws for k > 20).  Ties break toward the lexicographically
// smallest sorted cluster-id set.
GroupSelection select_groups_exhaustive(const ChannelClustering& clustering,
                                        const SubsetProbe& probe, int budget);

}  // namespace bstrat
