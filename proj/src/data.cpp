#include "hstmixer/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace hstmixer {

namespace {

constexpr char kMagic[5] = {'H', 'S', 'T', 'D', '1'};

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf[i]) << (8 * i);
  return v;
}

void write_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  unsigned char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 4);
}

void validate_interval(Index interval) {
  if (interval <= 0 || 1440 % interval != 0)
    throw DataError("interval of " + std::to_string(interval) +
                    " minutes does not divide 1440");
}

std::vector<std::string> split_fields(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void save_hstd(const std::string& path, const TrafficDataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  os.write(kMagic, 5);
  write_u64(os, static_cast<std::uint64_t>(ds.num_nodes));
  write_u64(os, static_cast<std::uint64_t>(ds.num_steps));
  write_u64(os, static_cast<std::uint64_t>(ds.start_epoch));
  write_u64(os, static_cast<std::uint64_t>(ds.interval_minutes));
  for (Index t = 0; t < ds.num_steps; ++t)
    for (Index n = 0; n < ds.num_nodes; ++n) write_f32(os, ds.at(n, t));
  if (!os) throw DataError("write failed: " + path);
}

TrafficDataset load_hstd(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, kMagic, 5) != 0)
    throw DataError("magic mismatch: " + path + " is not an HSTD1 file");
  TrafficDataset ds;
  ds.num_nodes = static_cast<Index>(read_u64(is));
  ds.num_steps = static_cast<Index>(read_u64(is));
  ds.start_epoch = static_cast<std::int64_t>(read_u64(is));
  ds.interval_minutes = static_cast<Index>(read_u64(is));
  if (!is) throw DataError("truncated header: " + path);
  validate_interval(ds.interval_minutes);
  const std::uint64_t expected = std::uint64_t(ds.num_nodes) * std::uint64_t(ds.num_steps) * 4;
  is.seekg(0, std::ios::end);
  const std::uint64_t actual = static_cast<std::uint64_t>(is.tellg()) - 37;
  if (actual < expected)
    throw DataError("truncated payload in " + path + ": expected " +
                    std::to_string(expected) + " bytes, got " +
                    std::to_string(actual));
  is.seekg(37, std::ios::beg);
  ds.series.assign(static_cast<std::size_t>(ds.num_nodes * ds.num_steps), 0.f);
  std::vector<unsigned char> row(static_cast<std::size_t>(ds.num_nodes) * 4);
  for (Index t = 0; t < ds.num_steps; ++t) {
    is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    for (Index n = 0; n < ds.num_nodes; ++n) {
      std::uint32_t bits = 0;
      for (int i = 0; i < 4; ++i)
        bits |= std::uint32_t(row[static_cast<std::size_t>(n) * 4 + i]) << (8 * i);
      float v;
      std::memcpy(&v, &bits, 4);
      ds.series[static_cast<std::size_t>(n * ds.num_steps + t)] = v;
    }
  }
  if (!is) throw DataError("read failed: " + path);
  return ds;
}

TrafficDataset load_csv_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open: " + path);
  std::string line;
  if (!std::getline(is, line)) throw DataError("empty CSV: " + path);
  auto header = split_fields(line, ',');
  if (header.size() < 2 || header[0] != "timestamp")
    throw DataError("CSV header must start with 'timestamp': " + path);
  const Index n = static_cast<Index>(header.size()) - 1;
  std::vector<std::int64_t> stamps;
  std::vector<float> rows;  // time-major
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto fields = split_fields(line, ',');
    if (static_cast<Index>(fields.size()) != n + 1)
      throw DataError("CSV row with " + std::to_string(fields.size()) +
                      " fields, expected " + std::to_string(n + 1) + ": " + path);
    stamps.push_back(std::stoll(fields[0]));
    for (Index i = 0; i < n; ++i)
      rows.push_back(std::stof(fields[static_cast<std::size_t>(i) + 1]));
  }
  if (stamps.size() < 2)
    throw DataError("CSV needs at least two rows to infer the interval: " + path);
  const std::int64_t step = stamps[1] - stamps[0];
  for (std::size_t i = 1; i < stamps.size(); ++i)
    if (stamps[i] - stamps[i - 1] != step || step <= 0)
      throw DataError("non-monotone timestamps at row " + std::to_string(i + 1) +
                      ": " + path);
  if (step % 60 != 0)
    throw DataError("timestamp interval is not a whole number of minutes: " + path);
  TrafficDataset ds;
  ds.num_nodes = n;
  ds.num_steps = static_cast<Index>(stamps.size());
  ds.start_epoch = stamps[0];
  ds.interval_minutes = static_cast<Index>(step / 60);
  validate_interval(ds.interval_minutes);
  ds.series.assign(static_cast<std::size_t>(n * ds.num_steps), 0.f);
  for (Index t = 0; t < ds.num_steps; ++t)
    for (Index node = 0; node < n; ++node)
      ds.series[static_cast<std::size_t>(node * ds.num_steps + t)] =
          rows[static_cast<std::size_t>(t * n + node)];
  return ds;
}

TrafficDataset aggregate_steps(const TrafficDataset& ds, Index factor) {
  if (factor <= 1) return ds;
  TrafficDataset out;
  out.num_nodes = ds.num_nodes;
  out.num_steps = ds.num_steps / factor;  // partial trailing group dropped
  if (out.num_steps == 0)
    throw DataError("aggregation factor " + std::to_string(factor) +
                    " leaves no steps");
  out.start_epoch = ds.start_epoch;
  out.interval_minutes = ds.interval_minutes * factor;
  validate_interval(out.interval_minutes);
  out.adjacency = ds.adjacency;
  out.region_labels = ds.region_labels;
  out.series.assign(static_cast<std::size_t>(out.num_nodes * out.num_steps), 0.f);
  for (Index n = 0; n < out.num_nodes; ++n)
    for (Index t = 0; t < out.num_steps; ++t) {
      double acc = 0.0;
      for (Index j = 0; j < factor; ++j) acc += ds.at(n, t * factor + j);
      out.series[static_cast<std::size_t>(n * out.num_steps + t)] =
          static_cast<float>(acc / double(factor));
    }
  return out;
}

TrafficDataset ingest(const std::string& path, Index aggregate) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  char magic[5] = {0};
  is.read(magic, 5);
  is.close();
  TrafficDataset ds = std::memcmp(magic, kMagic, 5) == 0 ? load_hstd(path)
                                                         : load_csv_dataset(path);
  return aggregate > 1 ? aggregate_steps(ds, aggregate) : ds;
}

std::vector<Edge> load_adjacency_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open: " + path);
  std::vector<Edge> edges;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto fields = split_fields(line, ',');
    if (fields.size() != 2 && fields.size() != 3)
      throw DataError("adjacency line " + std::to_string(lineno) +
                      " must be 'u,v[,w]': " + path);
    Edge e;
    e.u = std::stoll(fields[0]);
    e.v = std::stoll(fields[1]);
    e.w = fields.size() == 3 ? std::stod(fields[2]) : 1.0;
    edges.push_back(e);
  }
  return edges;
}

void save_region_labels(const std::string& path, const std::vector<Index>& labels) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open for writing: " + path);
  os << "node_id,region_id\n";
  for (std::size_t n = 0; n < labels.size(); ++n)
    os << n << ',' << labels[n] << '\n';
}

SplitSet split_and_normalize(std::shared_ptr<const TrafficDataset> ds,
                             SplitRatios ratios, bool seasonal,
                             bool per_node_norm) {
  if (ratios.train <= 0 || ratios.val < 0 || ratios.test < 0)
    throw DataError("invalid split ratios");
  SplitSet out;
  out.train.data = out.val.data = out.test.data = ds;

  auto add_chunk = [&](Index begin, Index end) {
    const Index len = end - begin;
    const Index b1 = begin + static_cast<Index>(std::llround(ratios.train * double(len)));
    const Index b2 = begin + static_cast<Index>(
                                 std::llround((ratios.train + ratios.val) * double(len)));
    out.train.segments.push_back({begin, b1});
    out.val.segments.push_back({b1, b2});
    out.test.segments.push_back({b2, end});
  };

  if (seasonal) {
    // Four contiguous "seasons", each split by the same ratios, then
    // concatenated per role.
    const Index quarter = ds->num_steps / 4;
    if (quarter == 0) throw DataError("dataset too short for seasonal splitting");
    for (Index q = 0; q < 4; ++q)
      add_chunk(q * quarter, q == 3 ? ds->num_steps : (q + 1) * quarter);
  } else {
    add_chunk(0, ds->num_steps);
  }

  for (const TrafficSplit* s : {&out.train, &out.val, &out.test})
    if (s->total_steps() == 0)
      throw DataError("empty split: ratios " + std::to_string(ratios.train) + "/" +
                      std::to_string(ratios.val) + "/" + std::to_string(ratios.test) +
                      " leave a role with no steps");

  NormStats norm;
  norm.per_node = per_node_norm;
  const Index n_nodes = ds->num_nodes;
  if (per_node_norm) {
    norm.node_mean.assign(static_cast<std::size_t>(n_nodes), 0.0);
    norm.node_std.assign(static_cast<std::size_t>(n_nodes), 1.0);
    for (Index node = 0; node < n_nodes; ++node) {
      double sum = 0.0, sq = 0.0;
      Index count = 0;
      for (const auto& seg : out.train.segments)
        for (Index t = seg.begin; t < seg.end; ++t) {
          const double v = ds->at(node, t);
          sum += v;
          sq += v * v;
          ++count;
        }
      const double mean = sum / double(count);
      const double var = std::max(0.0, sq / double(count) - mean * mean);
      norm.node_mean[static_cast<std::size_t>(node)] = mean;
      norm.node_std[static_cast<std::size_t>(node)] =
          std::max(std::sqrt(var), 1e-6);
    }
  } else {
    double sum = 0.0, sq = 0.0;
    Index count = 0;
    for (const auto& seg : out.train.segments)
      for (Index t = seg.begin; t < seg.end; ++t)
        for (Index node = 0; node < n_nodes; ++node) {
          const double v = ds->at(node, t);
          sum += v;
          sq += v * v;
          ++count;
        }
    norm.mean = sum / double(count);
    const double var = std::max(0.0, sq / double(count) - norm.mean * norm.mean);
    norm.stddev = std::max(std::sqrt(var), 1e-6);
  }
  out.train.norm = out.val.norm = out.test.norm = norm;
  return out;
}

std::vector<WindowRef> enumerate_windows(const TrafficSplit& split, Index t_in,
                                         Index t_pred, Index stride) {
  if (stride < 1) throw DataError("window stride must be >= 1");
  std::vector<WindowRef> refs;
  bool any_segment_fits = false;
  for (const auto& seg : split.segments) {
    const Index usable = seg.length() - t_in - t_pred + 1;
    if (usable <= 0) continue;
    any_segment_fits = true;
    for (Index i = 0; i < usable; i += stride)
      refs.push_back({seg.begin + i});
  }
  if (!any_segment_fits)
    throw DataError("split too short: no segment holds " + std::to_string(t_in) +
                    "+" + std::to_string(t_pred) + " steps");
  return refs;
}

TrafficDataset synth_dataset(const SynthOptions& opt) {
  if (opt.regions < 1 || opt.regions > opt.nodes)
    throw DataError("regions must be in [1, nodes], got " +
                    std::to_string(opt.regions));
  if (opt.nodes < 1 || opt.steps < 1)
    throw DataError("synth needs positive nodes and steps");
  validate_interval(opt.interval_minutes);

  TrafficDataset ds;
  ds.num_nodes = opt.nodes;
  ds.num_steps = opt.steps;
  ds.interval_minutes = opt.interval_minutes;
  ds.start_epoch = 1609718400;  // 2021-01-04 00:00 UTC, a Monday
  ds.series.assign(static_cast<std::size_t>(opt.nodes * opt.steps), 0.f);
  ds.region_labels.resize(static_cast<std::size_t>(opt.nodes));

  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  struct RegionProfile {
    double base, a1, a2, phase1, phase2, trend;
  };
  std::vector<RegionProfile> regions;
  const double two_pi = 2.0 * M_PI;
  for (Index r = 0; r < opt.regions; ++r) {
    RegionProfile p;
    p.base = 10.0 + 2.0 * (uni(rng) - 0.5);
    p.a1 = 1.2 + 1.2 * uni(rng);
    p.a2 = 0.3 + 0.5 * uni(rng);
    // Phases spread around the clock so regional profiles decorrelate.
    p.phase1 = two_pi * double(r) / double(opt.regions) + 0.3 * (uni(rng) - 0.5);
    p.phase2 = two_pi * uni(rng);
    p.trend = 1.6 * (uni(rng) - 0.5);
    regions.push_back(p);
  }

  const double rho = 0.8;
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Index steps_per_day = ds.slots_per_day();
  for (Index n = 0; n < opt.nodes; ++n) {
    const Index r = n * opt.regions / opt.nodes;
    ds.region_labels[static_cast<std::size_t>(n)] = r;
    const RegionProfile& p = regions[static_cast<std::size_t>(r)];
    double ar = 0.0;
    for (Index t = 0; t < opt.steps; ++t) {
      if (opt.noise_sigma > 0.0)
        ar = rho * ar + opt.noise_sigma * gauss(rng);
      const TimePoint tp = ds.time_at(t);
      const double tod = double(tp.minute_slot) / double(steps_per_day);
      const double weekend = tp.weekday >= 5 ? 0.75 : 1.0;
      const double daily = p.a1 * std::sin(two_pi * tod + p.phase1) +
                           p.a2 * std::sin(2.0 * two_pi * tod + p.phase2);
      const double trend =
          opt.steps > 1 ? p.trend * double(t) / double(opt.steps - 1) : 0.0;
      const double v = p.base + weekend * daily + trend + ar;
      ds.series[static_cast<std::size_t>(n * opt.steps + t)] =
          static_cast<float>(std::max(v, 0.5));
    }
  }
  return ds;
}

}  // namespace hstmixer
