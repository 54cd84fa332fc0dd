// Stride-sampled reference database, mean-pool global descriptors, exhaustive
// cosine top-K retrieval and pose-based match grading.
#pragma once

#include "ecd/encoder.hpp"
#include "ecd/tensor.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ecd {

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double rotation = 0.0;  // degrees, [-180, 180)
  double scale = 1.0;
};

// Absolute rotation difference on the circle, in [0, 180].
double wrapped_angle_diff(double a, double b);
double pose_distance(const Pose& a, const Pose& b);

struct ReferenceEntry {
  int sequence = 0;
  int index = 1;  // 1-based position in the source sequence
  Pose pose;
  Vec<float> descriptor;
  FeatureMap<float> features;
  std::string image;  // source image path, informational
};

// One frame of a source (t0) sequence before striding.
struct SourceFrame {
  Pose pose;
  FeatureMap<float> features;
  std::string image;
};

struct SourceSequence {
  int id = 0;
  std::vector<SourceFrame> frames;
};

class ReferenceDatabase {
 public:
  ReferenceDatabase() = default;
  ReferenceDatabase(int stride, std::vector<ReferenceEntry> entries,
                    std::vector<std::pair<int, int>> sequence_lengths);

  int stride() const { return stride_; }
  const std::vector<ReferenceEntry>& entries() const { return entries_; }
  const ReferenceEntry& entry(std::size_t i) const { return entries_.at(i); }
  std::size_t size() const { return entries_.size(); }
  // (sequence id, L_m) in build order.
  const std::vector<std::pair<int, int>>& sequence_lengths() const {
    return lengths_;
  }

 private:
  int stride_ = 1;
  std::vector<ReferenceEntry> entries_;
  std::vector<std::pair<int, int>> lengths_;
};

// Indices kept from a sequence of length L at stride s: 1, 1+s, ... <= L.
std::vector<int> strided_indices(int length, int stride);

ReferenceDatabase build_database(const std::vector<SourceSequence>& sequences,
                                 int stride);

// Spatial mean of per-position vectors, l2-normalized; zero map -> zero.
Vec<float> compute_descriptor(const FeatureMap<float>& f);

struct RetrievalHit {
  std::size_t entry = 0;  // index into ReferenceDatabase::entries()
  double similarity = 0.0;
};

// Highest cosine first; ties by (sequence, index) ascending. Entries with a
// zero descriptor rank below every entry with a nonzero one.
std::vector<RetrievalHit> retrieve_topk(const Vec<float>& query_descriptor,
                                        const ReferenceDatabase& db,
                                        std::size_t k);

enum class MatchLevel { kStrict, kCoarse, kMiss };
enum class CoarseRule { kThreshold, kSameSequence };

struct MatchCriteria {
  CoarseRule coarse_rule = CoarseRule::kThreshold;
  double strict_distance = 1.0;
  double strict_angle = 10.0;
  double coarse_distance = 25.0;
  double coarse_angle = 45.0;

  void validate() const;
};

const char* to_string(MatchLevel level);

MatchLevel classify_match(const Pose& query_pose,
                          std::optional<int> query_sequence,
                          const ReferenceEntry& entry,
                          const MatchCriteria& criteria);

// db.json manifest + per-entry ECDF descriptor and feature files.
void save_database(const std::filesystem::path& dir,
                   const ReferenceDatabase& db, const EncoderConfig& encoder);
ReferenceDatabase load_database(const std::filesystem::path& dir,
                                EncoderConfig* encoder = nullptr);

}  // namespace ecd
