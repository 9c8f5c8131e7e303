#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hstmixer/tensor.hpp"

namespace hstmixer {

// Minute-of-day slot (at the dataset interval) and day-of-week (0 = Monday).
struct TimePoint {
  Index minute_slot = 0;
  Index weekday = 0;
};

struct Edge {
  Index u = 0, v = 0;
  double w = 1.0;
};

struct TrafficDataset {
  Index num_nodes = 0;
  Index num_steps = 0;
  std::int64_t start_epoch = 0;  // unix seconds of step 0
  Index interval_minutes = 0;
  std::vector<float> series;       // node-major: series[n * num_steps + t]
  std::vector<Edge> adjacency;     // optional
  std::vector<Index> region_labels;  // ground truth for synthetic data

  float at(Index node, Index t) const {
    return series[static_cast<std::size_t>(node * num_steps + t)];
  }

  TimePoint time_at(Index t) const {
    const std::int64_t epoch = start_epoch + std::int64_t(t) * interval_minutes * 60;
    TimePoint tp;
    tp.minute_slot = static_cast<Index>((epoch % 86400) / 60 / interval_minutes);
    tp.weekday = static_cast<Index>((epoch / 86400 + 3) % 7);
    return tp;
  }

  Index slots_per_day() const { return 1440 / interval_minutes; }
};

// z-score statistics computed on the training split only.
struct NormStats {
  bool per_node = false;
  double mean = 0.0, stddev = 1.0;
  std::vector<double> node_mean, node_std;

  double normalize(Index node, double v) const {
    return per_node ? (v - node_mean[node]) / node_std[node]
                    : (v - mean) / stddev;
  }
  double denormalize(Index node, double v) const {
    return per_node ? v * node_std[node] + node_mean[node]
                    : v * stddev + mean;
  }
};

// [begin, end) global step range; splits may hold several disjoint segments
// when the seasonal splitting flag is on. Windows never cross segments.
struct Segment {
  Index begin = 0, end = 0;
  Index length() const { return end - begin; }
};

struct TrafficSplit {
  std::shared_ptr<const TrafficDataset> data;
  std::vector<Segment> segments;
  NormStats norm;

  Index total_steps() const {
    Index n = 0;
    for (const auto& s : segments) n += s.length();
    return n;
  }
};

struct SplitSet {
  TrafficSplit train, val, test;
};

struct SplitRatios {
  double train = 0.6, val = 0.2, test = 0.2;
};

// --- file formats ---------------------------------------------------------

// "HSTD1" binary: magic, N, T, start_epoch, interval_minutes as 64-bit LE,
// then N*T float32 LE values time-major.
void save_hstd(const std::string& path, const TrafficDataset& ds);
TrafficDataset load_hstd(const std::string& path);

// CSV alternative with header "timestamp,node_0,...".
TrafficDataset load_csv_dataset(const std::string& path);

// Dispatches on the HSTD1 magic; aggregate > 1 averages that many
// consecutive steps on load.
TrafficDataset ingest(const std::string& path, Index aggregate = 1);

TrafficDataset aggregate_steps(const TrafficDataset& ds, Index factor);

std::vector<Edge> load_adjacency_csv(const std::string& path);

void save_region_labels(const std::string& path, const std::vector<Index>& labels);

// --- splitting and windowing ----------------------------------------------

SplitSet split_and_normalize(std::shared_ptr<const TrafficDataset> ds,
                             SplitRatios ratios = {}, bool seasonal = false,
                             bool per_node_norm = false);

struct WindowRef {
  Index start = 0;  // global index of the first input step
};

// Sample i: x = steps [start, start+T), y = steps [start+T, start+T+T_pred).
std::vector<WindowRef> enumerate_windows(const TrafficSplit& split, Index t_in,
                                         Index t_pred, Index stride = 1);

// --- synthetic hierarchical generator ---------------------------------------

struct SynthOptions {
  Index nodes = 32;
  Index steps = 1344;  // two weeks at 15 minutes
  Index regions = 4;
  std::uint64_t seed = 0;
  double noise_sigma = 0.1;  // AR(1) innovation scale, rho = 0.8
  Index interval_minutes = 15;
};

TrafficDataset synth_dataset(const SynthOptions& opt);

// --- batches ----------------------------------------------------------------

template <typename S>
struct SampleBatch {
  Tensor<S> x;  // [B, N, T], normalized
  Tensor<S> y;  // [B, N, T_pred], data units
  std::vector<std::vector<TimePoint>> stamps;  // [B][T]
};

template <typename S>
SampleBatch<S> make_batch(const TrafficSplit& split,
                          const std::vector<WindowRef>& refs, Index t_in,
                          Index t_pred) {
  const auto& ds = *split.data;
  const Index b = static_cast<Index>(refs.size());
  const Index n = ds.num_nodes;
  SampleBatch<S> batch;
  batch.x = Tensor<S>::zeros({b, n, t_in});
  batch.y = Tensor<S>::zeros({b, n, t_pred});
  batch.stamps.resize(static_cast<std::size_t>(b));
  for (Index i = 0; i < b; ++i) {
    const Index start = refs[static_cast<std::size_t>(i)].start;
    for (Index node = 0; node < n; ++node) {
      for (Index j = 0; j < t_in; ++j)
        batch.x.data()[(i * n + node) * t_in + j] = static_cast<S>(
            split.norm.normalize(node, ds.at(node, start + j)));
      for (Index j = 0; j < t_pred; ++j)
        batch.y.data()[(i * n + node) * t_pred + j] =
            static_cast<S>(ds.at(node, start + t_in + j));
    }
    auto& st = batch.stamps[static_cast<std::size_t>(i)];
    st.resize(static_cast<std::size_t>(t_in));
    for (Index j = 0; j < t_in; ++j)
      st[static_cast<std::size_t>(j)] = ds.time_at(start + j);
  }
  return batch;
}

}  // namespace hstmixer
