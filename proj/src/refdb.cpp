#include "ecd/refdb.hpp"

#include "ecd/ecdf.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace ecd {

using nlohmann::json;

double wrapped_angle_diff(double a, double b) {
  double d = std::fmod(std::abs(a - b), 360.0);
  return std::min(d, 360.0 - d);
}

double pose_distance(const Pose& a, const Pose& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

ReferenceDatabase::ReferenceDatabase(
    int stride, std::vector<ReferenceEntry> entries,
    std::vector<std::pair<int, int>> sequence_lengths)
    : stride_(stride),
      entries_(std::move(entries)),
      lengths_(std::move(sequence_lengths)) {}

std::vector<int> strided_indices(int length, int stride) {
  if (stride < 1) throw std::invalid_argument("stride must be >= 1");
  std::vector<int> out;
  for (int j = 1; j <= length; j += stride) out.push_back(j);
  return out;
}

ReferenceDatabase build_database(const std::vector<SourceSequence>& sequences,
                                 int stride) {
  if (stride < 1) {
    throw std::invalid_argument(detail::concat("stride must be >= 1, got ", stride));
  }
  if (sequences.empty()) throw std::invalid_argument("no source sequences");
  std::vector<ReferenceEntry> entries;
  std::vector<std::pair<int, int>> lengths;
  for (const auto& seq : sequences) {
    const int length = static_cast<int>(seq.frames.size());
    lengths.emplace_back(seq.id, length);
    for (int j : strided_indices(length, stride)) {
      const SourceFrame& frame = seq.frames[static_cast<std::size_t>(j - 1)];
      ReferenceEntry e;
      e.sequence = seq.id;
      e.index = j;
      e.pose = frame.pose;
      e.features = frame.features;
      e.descriptor = compute_descriptor(frame.features);
      e.image = frame.image;
      entries.push_back(std::move(e));
    }
  }
  return ReferenceDatabase(stride, std::move(entries), std::move(lengths));
}

Vec<float> compute_descriptor(const FeatureMap<float>& f) {
  if (f.empty()) throw std::invalid_argument("empty feature map");
  Eigen::VectorXd mean =
      f.tokens().cast<double>().colwise().mean().transpose();
  const double norm = mean.norm();
  if (norm < kNormEps) return Vec<float>::Zero(f.channels());
  return (mean / norm).cast<float>();
}

std::vector<RetrievalHit> retrieve_topk(const Vec<float>& query_descriptor,
                                        const ReferenceDatabase& db,
                                        std::size_t k) {
  if (k > db.size()) {
    throw std::out_of_range(detail::concat("top-k ", k,
                                           " exceeds database size ",
                                           db.size()));
  }
  const Eigen::VectorXd q = query_descriptor.cast<double>();
  struct Scored {
    std::size_t entry;
    double similarity;
    bool nonzero;
  };
  std::vector<Scored> scored;
  scored.reserve(db.size());
  for (std::size_t i = 0; i < db.size(); ++i) {
    const auto& desc = db.entry(i).descriptor;
    if (desc.size() != q.size()) {
      throw DimensionError(detail::concat("descriptor dim ", desc.size(),
                                          " != query dim ", q.size()));
    }
    const Eigen::VectorXd v = desc.cast<double>();
    const double nv = v.norm();
    const double nq = q.norm();
    const bool nonzero = nv >= kNormEps;
    const double sim = (nonzero && nq >= kNormEps) ? v.dot(q) / (nv * nq) : 0.0;
    scored.push_back({i, sim, nonzero});
  }
  auto before = [&db](const Scored& a, const Scored& b) {
    if (a.nonzero != b.nonzero) return a.nonzero;
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    const auto& ea = db.entry(a.entry);
    const auto& eb = db.entry(b.entry);
    if (ea.sequence != eb.sequence) return ea.sequence < eb.sequence;
    return ea.index < eb.index;
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k),
                    scored.end(), before);
  std::vector<RetrievalHit> hits;
  hits.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    hits.push_back({scored[i].entry, scored[i].similarity});
  }
  return hits;
}

void MatchCriteria::validate() const {
  if (strict_distance > coarse_distance || strict_angle > coarse_angle) {
    throw std::invalid_argument("strict thresholds must not exceed coarse thresholds");
  }
}

const char* to_string(MatchLevel level) {
  switch (level) {
    case MatchLevel::kStrict: return "strict";
    case MatchLevel::kCoarse: return "coarse";
    case MatchLevel::kMiss: return "miss";
  }
  return "miss";
}

MatchLevel classify_match(const Pose& query_pose,
                          std::optional<int> query_sequence,
                          const ReferenceEntry& entry,
                          const MatchCriteria& criteria) {
  const double dist = pose_distance(query_pose, entry.pose);
  const double rot = wrapped_angle_diff(query_pose.rotation, entry.pose.rotation);
  if (dist <= criteria.strict_distance && rot <= criteria.strict_angle) {
    return MatchLevel::kStrict;
  }
  if (criteria.coarse_rule == CoarseRule::kSameSequence) {
    if (query_sequence && *query_sequence == entry.sequence) return MatchLevel::kCoarse;
  } else if (dist <= criteria.coarse_distance && rot <= criteria.coarse_angle) {
    return MatchLevel::kCoarse;
  }
  return MatchLevel::kMiss;
}

namespace {

json pose_to_json(const Pose& p) {
  return {{"x", p.x}, {"y", p.y}, {"rotation", p.rotation}, {"scale", p.scale}};
}

Pose pose_from_json(const json& j) {
  Pose p;
  p.x = j.at("x").get<double>();
  p.y = j.at("y").get<double>();
  p.rotation = j.at("rotation").get<double>();
  p.scale = j.at("scale").get<double>();
  return p;
}

std::string entry_stem(const ReferenceEntry& e) {
  return detail::concat("s", e.sequence, "_f", e.index);
}

}  // namespace

void save_database(const std::filesystem::path& dir,
                   const ReferenceDatabase& db, const EncoderConfig& encoder) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "descriptors");
  fs::create_directories(dir / "features");
  json manifest;
  manifest["format"] = "ecd-db";
  manifest["version"] = 1;
  manifest["stride"] = db.stride();
  manifest["encoder"] = {{"patch_size", encoder.patch_size},
                         {"feature_dim", encoder.feature_dim},
                         {"seed", encoder.seed}};
  json seqs = json::array();
  for (const auto& [id, length] : db.sequence_lengths()) {
    seqs.push_back({{"id", id}, {"length", length}});
  }
  manifest["sequences"] = seqs;
  json entries = json::array();
  for (const auto& e : db.entries()) {
    const std::string stem = entry_stem(e);
    const std::string desc_file = "descriptors/" + stem + ".ecdf";
    const std::string feat_file = "features/" + stem + ".ecdf";
    write_ecdf(dir / desc_file, matrix_to_ecdf(e.descriptor));
    save_feature_map(dir / feat_file, e.features);
    entries.push_back({{"sequence", e.sequence},
                       {"index", e.index},
                       {"pose", pose_to_json(e.pose)},
                       {"descriptor", desc_file},
                       {"features", feat_file},
                       {"image", e.image}});
  }
  manifest["entries"] = entries;
  std::ofstream out(dir / "db.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "db.json").string());
  out << manifest.dump(2) << "\n";
}

ReferenceDatabase load_database(const std::filesystem::path& dir,
                                EncoderConfig* encoder) {
  std::ifstream in(dir / "db.json");
  if (!in) throw std::runtime_error("missing database manifest " + (dir / "db.json").string());
  const json manifest = json::parse(in);
  if (manifest.value("format", "") != "ecd-db") {
    throw std::runtime_error("not an ecd database: " + dir.string());
  }
  if (encoder) {
    const auto& enc = manifest.at("encoder");
    encoder->patch_size = enc.at("patch_size").get<Index>();
    encoder->feature_dim = enc.at("feature_dim").get<Index>();
    encoder->seed = enc.at("seed").get<std::uint64_t>();
  }
  std::vector<std::pair<int, int>> lengths;
  for (const auto& s : manifest.at("sequences")) {
    lengths.emplace_back(s.at("id").get<int>(), s.at("length").get<int>());
  }
  std::vector<ReferenceEntry> entries;
  for (const auto& j : manifest.at("entries")) {
    ReferenceEntry e;
    e.sequence = j.at("sequence").get<int>();
    e.index = j.at("index").get<int>();
    e.pose = pose_from_json(j.at("pose"));
    e.descriptor = matrix_from_ecdf<float>(
        read_ecdf(dir / j.at("descriptor").get<std::string>()));
    e.features = load_feature_map<float>(dir / j.at("features").get<std::string>());
    e.image = j.value("image", "");
    entries.push_back(std::move(e));
  }
  return ReferenceDatabase(manifest.at("stride").get<int>(), std::move(entries),
                           std::move(lengths));
}

}  // namespace ecd
