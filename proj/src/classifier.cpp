#include "lcmigrate/classifier.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>

#include "lcmigrate/error.hpp"
#include "lcmigrate/io_util.hpp"
#include "lcmigrate/parallel.hpp"
#include "lcmigrate/rng.hpp"

namespace lcmigrate {

namespace {

constexpr char kMagic[4] = {'L', 'C', 'R', 'F'};
constexpr std::uint32_t kFormatVersion = 1;

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    if constexpr (std::is_same_v<T, double>) {
      put(std::bit_cast<std::uint64_t>(v));
    } else {
      using U = std::make_unsigned_t<T>;
      auto u = static_cast<U>(v);
      for (std::size_t i = 0; i < sizeof(T); ++i) {
        bytes_.push_back(static_cast<char>(u & 0xff));
        if constexpr (sizeof(T) > 1) u = static_cast<U>(u >> 8);
      }
    }
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes_ += s;
  }
  std::string take() { return std::move(bytes_); }
  void raw(const char* p, std::size_t n) { bytes_.append(p, n); }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view b) : bytes_(b) {}
  template <typename T>
  T get() {
    if constexpr (std::is_same_v<T, double>) {
      return std::bit_cast<double>(get<std::uint64_t>());
    } else {
      need(sizeof(T));
      using U = std::make_unsigned_t<T>;
      U u = 0;
      for (std::size_t i = 0; i < sizeof(T); ++i) {
        u = static_cast<U>(u | (static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i)));
      }
      pos_ += sizeof(T);
      return static_cast<T>(u);
    }
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view raw(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("model file truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

struct SplitCandidate {
  bool found = false;
  int feature = -1;
  double threshold = 0.0;
  double score = -1.0;
  double gap = 0.0;  // distance between the two values the threshold separates
};

class TreeBuilder {
 public:
  TreeBuilder(const FeatureMatrix& x, const std::vector<std::uint32_t>& y, std::size_t n_classes,
              const ForestConfig& config, int mtry, Rng rng)
      : x_(x), y_(y), n_classes_(n_classes), config_(config), mtry_(mtry), rng_(rng) {}

  RandomForestModel::Tree build() {
    const std::size_t n = static_cast<std::size_t>(x_.rows());
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    idx_.resize(n);
    for (auto& i : idx_) i = static_cast<std::uint32_t>(pick(rng_));
    features_.resize(static_cast<std::size_t>(x_.cols()));

    struct Pending {
      std::uint32_t node;
      std::size_t begin, end;
      int depth;
    };
    std::vector<Pending> stack;
    stack.push_back({new_node(), 0, n, 0});
    while (!stack.empty()) {
      const Pending job = stack.back();
      stack.pop_back();
      const auto counts = class_counts(job.begin, job.end);
      const std::size_t size = job.end - job.begin;
      const bool pure = std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }) <= 1;
      const bool too_small = size < 2 * static_cast<std::size_t>(config_.min_samples_leaf);
      const bool too_deep = config_.max_depth && job.depth >= *config_.max_depth;
      SplitCandidate split;
      if (!pure && !too_small && !too_deep) split = best_split(job.begin, job.end, counts);
      if (!split.found) {
        make_leaf(job.node, counts);
        continue;
      }
      const auto mid = static_cast<std::size_t>(
          std::partition(idx_.begin() + static_cast<std::ptrdiff_t>(job.begin),
                         idx_.begin() + static_cast<std::ptrdiff_t>(job.end),
                         [&](std::uint32_t r) { return x_(r, split.feature) <= split.threshold; }) -
          idx_.begin());
      const std::uint32_t l = new_node();
      const std::uint32_t r = new_node();
      tree_.feature[job.node] = split.feature;
      tree_.threshold[job.node] = split.threshold;
      tree_.left[job.node] = l;
      tree_.right[job.node] = r;
      // Right first so the left subtree is expanded first.
      stack.push_back({r, mid, job.end, job.depth + 1});
      stack.push_back({l, job.begin, mid, job.depth + 1});
    }
    return std::move(tree_);
  }

 private:
  std::uint32_t new_node() {
    tree_.feature.push_back(-1);
    tree_.threshold.push_back(0.0);
    tree_.left.push_back(0);
    tree_.right.push_back(0);
    tree_.leaf_class.push_back(0);
    return static_cast<std::uint32_t>(tree_.feature.size() - 1);
  }

  std::vector<std::size_t> class_counts(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> counts(n_classes_, 0);
    for (std::size_t i = begin; i < end; ++i) ++counts[y_[idx_[i]]];
    return counts;
  }

  void make_leaf(std::uint32_t node, const std::vector<std::size_t>& counts) {
    // max_element returns the first maximum, i.e. the smallest class index.
    tree_.leaf_class[node] = static_cast<std::uint32_t>(
        std::max_element(counts.begin(), counts.end()) - counts.begin());
  }

  SplitCandidate best_split(std::size_t begin, std::size_t end, const std::vector<std::size_t>& counts) {
    const std::size_t n = end - begin;
    const auto min_leaf = static_cast<std::size_t>(config_.min_samples_leaf);
    std::iota(features_.begin(), features_.end(), 0);
    SplitCandidate best;
    int evaluated = 0;
    for (std::size_t j = 0; j < features_.size() && evaluated < mtry_; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, features_.size() - 1);
      std::swap(features_[j], features_[pick(rng_)]);
      const int f = features_[j];

      pairs_.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto r = idx_[begin + i];
        pairs_[i] = {x_(r, f), y_[r]};
      }
      std::sort(pairs_.begin(), pairs_.end());
      if (pairs_.front().first == pairs_.back().first) continue;  // constant here
      ++evaluated;

      left_.assign(n_classes_, 0);
      right_.assign(counts.begin(), counts.end());
      double sl2 = 0.0, sr2 = 0.0;
      for (auto c : counts) sr2 += static_cast<double>(c) * static_cast<double>(c);
      for (std::size_t i = 0; i + 1 < n; ++i) {
        const auto c = pairs_[i].second;
        sl2 += 2.0 * static_cast<double>(left_[c]) + 1.0;
        sr2 -= 2.0 * static_cast<double>(right_[c]) - 1.0;
        ++left_[c];
        --right_[c];
        const std::size_t nl = i + 1, nr = n - nl;
        if (nl < min_leaf || nr < min_leaf) continue;
        const double lo = pairs_[i].first, hi = pairs_[i + 1].first;
        if (!(lo < hi)) continue;
        // Maximizing sum(l_c^2)/n_l + sum(r_c^2)/n_r minimizes weighted Gini.
        const double score = sl2 / static_cast<double>(nl) + sr2 / static_cast<double>(nr);
        // Equal scores prefer the wider gap, so the choice does not hinge on
        // the order in which features were visited.
        if (score > best.score || (score == best.score && hi - lo > best.gap)) {
          double t = lo + 0.5 * (hi - lo);
          if (!(t < hi)) t = lo;
          best = {true, f, t, score, hi - lo};
        }
      }
    }
    return best;
  }

  const FeatureMatrix& x_;
  const std::vector<std::uint32_t>& y_;
  std::size_t n_classes_;
  const ForestConfig& config_;
  int mtry_;
  Rng rng_;
  RandomForestModel::Tree tree_;
  std::vector<std::uint32_t> idx_;
  std::vector<int> features_;
  std::vector<std::pair<double, std::uint32_t>> pairs_;
  std::vector<std::size_t> left_, right_;
};

}  // namespace

// ---------------------------------------------------------------------------

void TrainedModel::check_dim(const FeatureMatrix& features) const {
  if (static_cast<std::size_t>(features.cols()) != feature_dim()) {
    throw DataError("feature dimension mismatch: model expects " + std::to_string(feature_dim()) +
                    ", got " + std::to_string(features.cols()));
  }
}

std::vector<int> TrainedModel::predict(const FeatureMatrix& features) const {
  const Eigen::MatrixXd proba = predict_proba(features);
  std::vector<int> out(static_cast<std::size_t>(proba.rows()));
  for (Eigen::Index r = 0; r < proba.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < proba.cols(); ++c) {
      if (proba(r, c) > proba(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = classes()[static_cast<std::size_t>(best)];
  }
  return out;
}

void TrainedModel::save(const std::filesystem::path& path) const { atomic_write(path, serialize()); }

void ForestConfig::validate() const {
  if (n_trees < 1) throw DataError("n_trees must be positive");
  if (min_samples_leaf < 1) throw DataError("min_samples_leaf must be positive");
  if (max_depth && *max_depth < 1) throw DataError("max_depth must be positive");
  if (max_features && *max_features < 1) throw DataError("max_features must be positive");
}

int ForestConfig::resolved_max_features(std::size_t dim) const {
  if (max_features) {
    if (static_cast<std::size_t>(*max_features) > dim) {
      throw DataError("max_features " + std::to_string(*max_features) + " exceeds feature dimension " +
                      std::to_string(dim));
    }
    return *max_features;
  }
  return std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(dim)))));
}

std::uint32_t RandomForestModel::Tree::leaf_for(const double* row) const {
  std::uint32_t node = 0;
  while (feature[node] >= 0) {
    node = row[feature[node]] <= threshold[node] ? left[node] : right[node];
  }
  return leaf_class[node];
}

RandomForestModel::RandomForestModel(ForestConfig config, std::vector<int> classes,
                                     std::size_t feature_dim, std::uint64_t n_samples,
                                     std::vector<Tree> trees)
    : config_(config),
      classes_(std::move(classes)),
      feature_dim_(feature_dim),
      n_samples_(n_samples),
      trees_(std::move(trees)) {
  if (classes_.empty() || trees_.empty()) throw DataError("random forest: empty model");
}

Eigen::MatrixXd RandomForestModel::predict_proba(const FeatureMatrix& features) const {
  check_dim(features);
  const auto rows = static_cast<std::size_t>(features.rows());
  Eigen::MatrixXd proba = Eigen::MatrixXd::Zero(features.rows(), static_cast<Eigen::Index>(classes_.size()));
  const double share = 1.0 / static_cast<double>(trees_.size());
  constexpr std::size_t kBlock = 1024;
  parallel_for(0, (rows + kBlock - 1) / kBlock, [&](std::size_t blk) {
    const std::size_t lo = blk * kBlock, hi = std::min(rows, lo + kBlock);
    std::vector<std::uint32_t> votes(classes_.size());
    for (std::size_t r = lo; r < hi; ++r) {
      std::fill(votes.begin(), votes.end(), 0);
      const double* row = features.data() + r * feature_dim_;
      for (const auto& t : trees_) ++votes[t.leaf_for(row)];
      for (std::size_t c = 0; c < votes.size(); ++c) {
        proba(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = votes[c] * share;
      }
    }
  });
  return proba;
}

std::string RandomForestModel::serialize() const {
  ByteWriter w;
  w.raw(kMagic, 4);
  w.put(kFormatVersion);
  w.put(static_cast<std::int32_t>(config_.n_trees));
  w.put(static_cast<std::int32_t>(config_.max_features.value_or(-1)));
  w.put(static_cast<std::int32_t>(config_.min_samples_leaf));
  w.put(static_cast<std::int32_t>(config_.max_depth.value_or(-1)));
  w.put(config_.seed);
  w.put(static_cast<std::uint64_t>(feature_dim_));
  w.put(n_samples_);
  w.put(static_cast<std::uint32_t>(classes_.size()));
  for (int c : classes_) w.put(static_cast<std::int32_t>(c));
  w.put(static_cast<std::uint32_t>(legend().size()));
  for (const auto& [id, name] : legend()) {
    w.put(static_cast<std::int32_t>(id));
    w.put_string(name);
  }
  w.put(static_cast<std::uint32_t>(trees_.size()));
  for (const auto& t : trees_) {
    w.put(static_cast<std::uint32_t>(t.feature.size()));
    for (std::size_t i = 0; i < t.feature.size(); ++i) {
      w.put(t.feature[i]);
      w.put(t.threshold[i]);
      w.put(t.left[i]);
      w.put(t.right[i]);
      w.put(t.leaf_class[i]);
    }
  }
  return w.take();
}

std::unique_ptr<RandomForestModel> RandomForestModel::deserialize(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.raw(4) != std::string_view(kMagic, 4)) throw DataError("not a random forest model file");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) {
    throw DataError("unsupported model format version " + std::to_string(version));
  }
  ForestConfig cfg;
  cfg.n_trees = r.get<std::int32_t>();
  if (auto mf = r.get<std::int32_t>(); mf >= 0) cfg.max_features = mf;
  cfg.min_samples_leaf = r.get<std::int32_t>();
  if (auto md = r.get<std::int32_t>(); md >= 0) cfg.max_depth = md;
  cfg.seed = r.get<std::uint64_t>();
  const auto dim = static_cast<std::size_t>(r.get<std::uint64_t>());
  const auto n_samples = r.get<std::uint64_t>();
  std::vector<int> classes(r.get<std::uint32_t>());
  for (auto& c : classes) c = r.get<std::int32_t>();
  Legend legend;
  const auto n_legend = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_legend; ++i) {
    const int id = r.get<std::int32_t>();
    legend[id] = r.get_string();
  }
  std::vector<Tree> trees(r.get<std::uint32_t>());
  for (auto& t : trees) {
    const auto n = r.get<std::uint32_t>();
    t.feature.resize(n);
    t.threshold.resize(n);
    t.left.resize(n);
    t.right.resize(n);
    t.leaf_class.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      t.feature[i] = r.get<std::int32_t>();
      t.threshold[i] = r.get<double>();
      t.left[i] = r.get<std::uint32_t>();
      t.right[i] = r.get<std::uint32_t>();
      t.leaf_class[i] = r.get<std::uint32_t>();
      const bool bad_split = t.feature[i] >= 0 && (static_cast<std::size_t>(t.feature[i]) >= dim ||
                                                   t.left[i] >= n || t.right[i] >= n || t.left[i] <= i ||
                                                   t.right[i] <= i);
      if (bad_split || t.leaf_class[i] >= classes.size()) throw DataError("model file: corrupt tree");
    }
    if (n == 0) throw DataError("model file: empty tree");
  }
  if (!r.done()) throw DataError("model file: trailing bytes");
  auto model = std::make_unique<RandomForestModel>(cfg, std::move(classes), dim, n_samples, std::move(trees));
  model->set_legend(std::move(legend));
  return model;
}

RandomForest::RandomForest(ForestConfig config) : config_(config) { config_.validate(); }

std::unique_ptr<TrainedModel> RandomForest::fit(const FeatureMatrix& features, std::span<const int> labels,
                                                std::span<const std::string> row_ids) const {
  const auto n = static_cast<std::size_t>(features.rows());
  const auto d = static_cast<std::size_t>(features.cols());
  if (labels.size() != n) {
    throw DataError("fit: " + std::to_string(n) + " feature rows but " + std::to_string(labels.size()) +
                    " labels");
  }
  if (!row_ids.empty() && row_ids.size() != n) throw DataError("fit: row id count mismatch");
  if (n < 2) throw DataError("fit: need at least 2 samples");
  if (d == 0) throw DataError("fit: zero-dimensional features");
  std::vector<std::string> bad;
  for (std::size_t r = 0; r < n; ++r) {
    if (!features.row(static_cast<Eigen::Index>(r)).allFinite()) {
      bad.push_back(row_ids.empty() ? "#" + std::to_string(r) : row_ids[r]);
    }
  }
  if (!bad.empty()) {
    std::string msg = "fit: non-finite features in rows:";
    for (std::size_t i = 0; i < bad.size() && i < 50; ++i) msg += " " + bad[i];
    if (bad.size() > 50) msg += " ...";
    throw DataError(msg);
  }
  std::vector<int> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) throw DataError("fit: need at least two distinct classes");
  std::map<int, std::uint32_t> index_of;
  for (std::size_t i = 0; i < classes.size(); ++i) index_of[classes[i]] = static_cast<std::uint32_t>(i);
  std::vector<std::uint32_t> y(n);
  for (std::size_t r = 0; r < n; ++r) y[r] = index_of[labels[r]];

  const int mtry = config_.resolved_max_features(d);
  std::vector<RandomForestModel::Tree> trees(static_cast<std::size_t>(config_.n_trees));
  parallel_for(0, trees.size(), [&](std::size_t t) {
    TreeBuilder builder(features, y, classes.size(), config_, mtry, make_rng(config_.seed, t));
    trees[t] = builder.build();
  });
  return std::make_unique<RandomForestModel>(config_, std::move(classes), d, n, std::move(trees));
}

std::unique_ptr<TrainedModel> load_model(const std::filesystem::path& path) {
  return RandomForestModel::deserialize(read_file(path));
}

ClassMap predict_raster(const TrainedModel& model, const RasterStack& stack, const Legend* legend) {
  if (stack.band_count() != model.feature_dim()) {
    throw DataError("predict_raster: raster has " + std::to_string(stack.band_count()) +
                    " bands, model expects " + std::to_string(model.feature_dim()));
  }
  for (int c : model.classes()) {
    if (c < 0 || c >= kClassNodata) throw DataError("predict_raster: class id " + std::to_string(c) + " does not fit u8");
  }
  ClassMap map;
  map.width = stack.width();
  map.height = stack.height();
  map.transform = stack.transform();
  map.legend = legend ? *legend : model.legend();
  if (map.legend.empty()) {
    for (int c : model.classes()) map.legend[c] = "class_" + std::to_string(c);
  }
  map.classes.assign(stack.pixel_count(), kClassNodata);

  std::vector<std::size_t> valid;
  valid.reserve(stack.pixel_count());
  for (std::size_t p = 0; p < stack.pixel_count(); ++p) {
    if (!stack.is_nodata(p)) valid.push_back(p);
  }
  constexpr std::size_t kBlock = 16384;
  for (std::size_t lo = 0; lo < valid.size(); lo += kBlock) {
    const std::size_t hi = std::min(valid.size(), lo + kBlock);
    FeatureMatrix x(static_cast<Eigen::Index>(hi - lo), static_cast<Eigen::Index>(stack.band_count()));
    for (std::size_t i = lo; i < hi; ++i) {
      for (std::size_t b = 0; b < stack.band_count(); ++b) {
        x(static_cast<Eigen::Index>(i - lo), static_cast<Eigen::Index>(b)) = stack.value(b, valid[i]);
      }
    }
    const auto pred = model.predict(x);
    for (std::size_t i = lo; i < hi; ++i) map.classes[valid[i]] = static_cast<std::uint8_t>(pred[i - lo]);
  }
  map.validate();
  return map;
}

}  // namespace lcmigrate
