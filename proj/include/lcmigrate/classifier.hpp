#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lcmigrate/raster.hpp"

namespace lcmigrate {

using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A fitted classifier. Implementations are immutable after construction.
class TrainedModel {
 public:
  virtual ~TrainedModel() = default;

  /// Class ids in ascending order; probability columns follow this order.
  virtual const std::vector<int>& classes() const = 0;
  virtual std::size_t feature_dim() const = 0;
  /// One row per input row, each a distribution over classes().
  virtual Eigen::MatrixXd predict_proba(const FeatureMatrix& features) const = 0;
  virtual std::string serialize() const = 0;

  /// argmax of predict_proba; ties go to the smallest class id.
  std::vector<int> predict(const FeatureMatrix& features) const;
  void save(const std::filesystem::path& path) const;

  const Legend& legend() const { return legend_; }
  void set_legend(Legend legend) { legend_ = std::move(legend); }

 protected:
  void check_dim(const FeatureMatrix& features) const;

 private:
  Legend legend_;
};

/// Learner side of the classifier contract.
class Classifier {
 public:
  virtual ~Classifier() = default;
  /// `row_ids`, when given, names rows in error messages.
  virtual std::unique_ptr<TrainedModel> fit(const FeatureMatrix& features, std::span<const int> labels,
                                            std::span<const std::string> row_ids = {}) const = 0;
};

struct ForestConfig {
  int n_trees = 100;
  std::optional<int> max_features;  // nullopt: floor(sqrt(d)), at least 1
  int min_samples_leaf = 1;
  std::optional<int> max_depth;     // nullopt: unlimited
  std::uint64_t seed = 0;

  void validate() const;
  int resolved_max_features(std::size_t dim) const;
};

class RandomForestModel final : public TrainedModel {
 public:
  struct Tree {
    std::vector<std::int32_t> feature;  // -1 marks a leaf
    std::vector<double> threshold;      // go left when x <= threshold
    std::vector<std::uint32_t> left;
    std::vector<std::uint32_t> right;
    std::vector<std::uint32_t> leaf_class;  // index into classes()

    std::uint32_t leaf_for(const double* row) const;
  };

  RandomForestModel(ForestConfig config, std::vector<int> classes, std::size_t feature_dim,
                    std::uint64_t n_samples, std::vector<Tree> trees);

  const std::vector<int>& classes() const override { return classes_; }
  std::size_t feature_dim() const override { return feature_dim_; }
  Eigen::MatrixXd predict_proba(const FeatureMatrix& features) const override;
  std::string serialize() const override;

  const ForestConfig& config() const { return config_; }
  std::uint64_t n_samples() const { return n_samples_; }
  const std::vector<Tree>& trees() const { return trees_; }

  static std::unique_ptr<RandomForestModel> deserialize(std::string_view bytes);

 private:
  ForestConfig config_;
  std::vector<int> classes_;
  std::size_t feature_dim_;
  std::uint64_t n_samples_;
  std::vector<Tree> trees_;
};

/// Bootstrap-aggregated CART trees with Gini splits and a random feature
/// subset per node. Tree t draws from its own stream seeded by (seed, t), so
/// results do not depend on how trees are scheduled across threads.
class RandomForest final : public Classifier {
 public:
  explicit RandomForest(ForestConfig config = {});
  std::unique_ptr<TrainedModel> fit(const FeatureMatrix& features, std::span<const int> labels,
                                    std::span<const std::string> row_ids = {}) const override;
  const ForestConfig& config() const { return config_; }

 private:
  ForestConfig config_;
};

std::unique_ptr<TrainedModel> load_model(const std::filesystem::path& path);

/// Per-pixel prediction; nodata pixels stay nodata. The legend defaults to
/// the model's.
ClassMap predict_raster(const TrainedModel& model, const RasterStack& stack,
                        const Legend* legend = nullptr);

}  // namespace lcmigrate
