// Deterministic synthetic environment: a 2-D canvas of coloured shapes over
// a smooth background, observed before (t0) and after (t1) a set of injected
// changes by cameras that slide along per-sequence paths.
//
// Poses are in world units; `pixels_per_unit` converts to canvas pixels.
// Rotation is metadata only (used by match grading), never rendered.
#pragma once

#include "ecd/change_head.hpp"
#include "ecd/encoder.hpp"
#include "ecd/refdb.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ecd {

struct WorldSpec {
  Index canvas_width = 136;
  Index canvas_height = 400;
  int min_objects = 60;
  int max_objects = 80;
  double min_object_size = 3.0;  // pixels: radius or half extent
  double max_object_size = 8.0;
  int sequences = 10;
  int frames_per_sequence = 25;
  int val_sequences = 2;      // the last sequences form the validation split
  double pixels_per_unit = 8.0;
  double camera_step = 0.5;      // units between consecutive frames
  double camera_jitter = 0.0;    // units, applied to t1 query positions
  double rotation_jitter = 0.0;  // degrees, applied to t1 query headings
  double scale_jitter = 0.0;     // t1 query scale drawn from [1-j, 1+j]
  Index crop_size = 32;
  int inserts = 8;
  int deletes = 8;
  int recolors = 8;
  double texture = 0.04;  // amplitude of static background texture
  double background_cell = 64.0;  // pixels between background colour knots
  std::uint64_t seed = 42;

  // Queries reuse the exact t0 poses and record their oracle partner.
  bool aligned() const {
    return camera_jitter == 0.0 && rotation_jitter == 0.0 && scale_jitter == 0.0;
  }
  void validate() const;
};

enum class ShapeKind { kRectangle, kDisk };

struct Color {
  float r = 0, g = 0, b = 0;
  bool operator==(const Color&) const = default;
};

struct WorldObject {
  int id = 0;
  ShapeKind kind = ShapeKind::kDisk;
  double cx = 0, cy = 0;  // pixels
  double size = 1;        // radius (disk) or half extent (square)
  Color color;

  bool covers(double x, double y) const;
};

enum class ChangeKind { kInsert, kDelete, kRecolor };

struct ChangeRecord {
  ChangeKind kind = ChangeKind::kInsert;
  int object_id = 0;
  // Pixel bounding box [x0, x1) x [y0, y1) of the affected footprint.
  Index x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

// Rendered scene state: RGB plus the id of the topmost object per pixel
// (-1 for background).
struct Canvas {
  Image rgb;
  std::vector<int> ids;
  Index width() const { return rgb.width(); }
  Index height() const { return rgb.height(); }
  int id_at(Index x, Index y) const { return ids[static_cast<std::size_t>(y * width() + x)]; }
};

struct FrameRecord {
  int sequence = 0;
  int index = 1;  // 1-based
  Pose pose;
  std::string image;
};

struct QueryRecord {
  int sequence = 0;
  int index = 1;
  Pose pose;
  std::string image;
  std::string mask;
  bool validation = false;
  std::optional<int> oracle_index;  // t0 frame with the identical pose
};

struct WorldManifest {
  WorldSpec spec;
  std::vector<FrameRecord> references;  // t0, grouped by sequence
  std::vector<QueryRecord> queries;     // t1
  std::vector<ChangeRecord> changes;
};

struct World {
  WorldManifest manifest;
  std::vector<Image> reference_images;
  std::vector<Image> query_images;
  std::vector<Mask> query_masks;
  Canvas before;
  Canvas after;
};

Canvas render_canvas(const WorldSpec& spec, const std::vector<WorldObject>& objects);

// Axis-aligned crop of side crop_size/scale centred on the pose, resampled
// bilinearly to crop_size and quantized to 8-bit levels.
Image render_crop(const Canvas& canvas, const Pose& pose, Index crop_size,
                  double pixels_per_unit);

// Per-pixel difference of the two canvases at the crop's sample locations
// (nearest canvas pixel).
Mask change_mask(const Canvas& before, const Canvas& after, const Pose& pose,
                 Index crop_size, double pixels_per_unit);

World generate_world(const WorldSpec& spec);

// Writes manifest.json, t0/*.ppm, t1/*.ppm and masks/*.pgm.
void write_world(const std::filesystem::path& dir, const World& world);
World load_world(const std::filesystem::path& dir);

// FNV-1a over the manifest and every pixel/mask byte.
std::uint64_t world_hash(const World& world);

// Groups the t0 frames into encoder-featured source sequences.
std::vector<SourceSequence> source_sequences(const World& world,
                                             const Encoder& encoder);

}  // namespace ecd
