#include "ecd/synthworld.hpp"

#include "ecd/image_io.hpp"
#include "ecd/random.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <map>

namespace ecd {

using nlohmann::json;

namespace {

// Largest half-extent (pixels) a crop can need around its centre, including
// the bilinear neighbour.
double crop_reach(const WorldSpec& s) {
  const double half = static_cast<double>(s.crop_size) / (2.0 * (1.0 - s.scale_jitter));
  return half + s.camera_jitter * s.pixels_per_unit + 1.0;
}

double path_x(const WorldSpec& s, int frame) {
  return crop_reach(s) + (frame - 1) * s.camera_step * s.pixels_per_unit;
}

double path_y(const WorldSpec& s, int sequence) {
  const double reach = crop_reach(s);
  if (s.sequences == 1) return static_cast<double>(s.canvas_height) / 2.0;
  const double span = static_cast<double>(s.canvas_height) - 2.0 * reach;
  return reach + span * sequence / (s.sequences - 1);
}

Color random_color(Rng& rng) {
  return {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()),
          static_cast<float>(rng.uniform())};
}

float color_distance(const Color& a, const Color& b) {
  return std::max({std::abs(a.r - b.r), std::abs(a.g - b.g), std::abs(a.b - b.b)});
}

WorldObject random_object(int id, const WorldSpec& s, Rng& rng) {
  WorldObject o;
  o.id = id;
  o.kind = rng.uniform() < 0.5 ? ShapeKind::kRectangle : ShapeKind::kDisk;
  o.cx = rng.uniform(0.0, static_cast<double>(s.canvas_width));
  o.cy = rng.uniform(0.0, static_cast<double>(s.canvas_height));
  o.size = rng.uniform(s.min_object_size, s.max_object_size);
  o.color = random_color(rng);
  return o;
}

ChangeRecord footprint(ChangeKind kind, const WorldObject& o, const WorldSpec& s) {
  ChangeRecord r;
  r.kind = kind;
  r.object_id = o.id;
  r.x0 = std::clamp<Index>(static_cast<Index>(std::floor(o.cx - o.size)), 0, s.canvas_width);
  r.y0 = std::clamp<Index>(static_cast<Index>(std::floor(o.cy - o.size)), 0, s.canvas_height);
  r.x1 = std::clamp<Index>(static_cast<Index>(std::ceil(o.cx + o.size)) + 1, 0, s.canvas_width);
  r.y1 = std::clamp<Index>(static_cast<Index>(std::ceil(o.cy + o.size)) + 1, 0, s.canvas_height);
  return r;
}

float quantize_level(float v) { return static_cast<float>(quantize(v)) / 255.0f; }

std::string frame_stem(int sequence, int index) {
  return "s" + std::to_string(sequence) + "_f" + std::to_string(index);
}

const char* kind_name(ChangeKind k) {
  switch (k) {
    case ChangeKind::kInsert: return "insert";
    case ChangeKind::kDelete: return "delete";
    case ChangeKind::kRecolor: return "recolor";
  }
  return "insert";
}

ChangeKind parse_kind(const std::string& s) {
  if (s == "insert") return ChangeKind::kInsert;
  if (s == "delete") return ChangeKind::kDelete;
  if (s == "recolor") return ChangeKind::kRecolor;
  throw std::runtime_error("unknown change kind " + s);
}

json spec_to_json(const WorldSpec& s) {
  return {{"canvas_width", s.canvas_width},
          {"canvas_height", s.canvas_height},
          {"min_objects", s.min_objects},
          {"max_objects", s.max_objects},
          {"min_object_size", s.min_object_size},
          {"max_object_size", s.max_object_size},
          {"sequences", s.sequences},
          {"frames_per_sequence", s.frames_per_sequence},
          {"val_sequences", s.val_sequences},
          {"pixels_per_unit", s.pixels_per_unit},
          {"camera_step", s.camera_step},
          {"camera_jitter", s.camera_jitter},
          {"rotation_jitter", s.rotation_jitter},
          {"scale_jitter", s.scale_jitter},
          {"crop_size", s.crop_size},
          {"inserts", s.inserts},
          {"deletes", s.deletes},
          {"recolors", s.recolors},
          {"texture", s.texture},
          {"background_cell", s.background_cell},
          {"seed", s.seed}};
}

WorldSpec spec_from_json(const json& j) {
  WorldSpec s;
  s.canvas_width = j.at("canvas_width").get<Index>();
  s.canvas_height = j.at("canvas_height").get<Index>();
  s.min_objects = j.at("min_objects").get<int>();
  s.max_objects = j.at("max_objects").get<int>();
  s.min_object_size = j.at("min_object_size").get<double>();
  s.max_object_size = j.at("max_object_size").get<double>();
  s.sequences = j.at("sequences").get<int>();
  s.frames_per_sequence = j.at("frames_per_sequence").get<int>();
  s.val_sequences = j.at("val_sequences").get<int>();
  s.pixels_per_unit = j.at("pixels_per_unit").get<double>();
  s.camera_step = j.at("camera_step").get<double>();
  s.camera_jitter = j.at("camera_jitter").get<double>();
  s.rotation_jitter = j.at("rotation_jitter").get<double>();
  s.scale_jitter = j.at("scale_jitter").get<double>();
  s.crop_size = j.at("crop_size").get<Index>();
  s.inserts = j.at("inserts").get<int>();
  s.deletes = j.at("deletes").get<int>();
  s.recolors = j.at("recolors").get<int>();
  s.texture = j.at("texture").get<double>();
  s.background_cell = j.at("background_cell").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

json pose_json(const Pose& p) {
  return {{"x", p.x}, {"y", p.y}, {"rotation", p.rotation}, {"scale", p.scale}};
}

Pose pose_from(const json& j) {
  return {j.at("x").get<double>(), j.at("y").get<double>(),
          j.at("rotation").get<double>(), j.at("scale").get<double>()};
}

json manifest_to_json(const WorldManifest& m) {
  json j;
  j["format"] = "ecd-world";
  j["version"] = 1;
  j["spec"] = spec_to_json(m.spec);
  json refs = json::array();
  for (const auto& r : m.references) {
    refs.push_back({{"sequence", r.sequence},
                    {"index", r.index},
                    {"pose", pose_json(r.pose)},
                    {"image", r.image}});
  }
  j["references"] = refs;
  json queries = json::array();
  for (const auto& q : m.queries) {
    json e = {{"sequence", q.sequence},
              {"index", q.index},
              {"pose", pose_json(q.pose)},
              {"image", q.image},
              {"mask", q.mask},
              {"split", q.validation ? "val" : "train"}};
    e["oracle_index"] = q.oracle_index ? json(*q.oracle_index) : json(nullptr);
    queries.push_back(e);
  }
  j["queries"] = queries;
  json changes = json::array();
  for (const auto& c : m.changes) {
    changes.push_back({{"kind", kind_name(c.kind)},
                       {"object", c.object_id},
                       {"bbox", {c.x0, c.y0, c.x1, c.y1}}});
  }
  j["changes"] = changes;
  return j;
}

WorldManifest manifest_from_json(const json& j) {
  if (j.value("format", "") != "ecd-world") throw std::runtime_error("not an ecd world manifest");
  WorldManifest m;
  m.spec = spec_from_json(j.at("spec"));
  for (const auto& r : j.at("references")) {
    m.references.push_back({r.at("sequence").get<int>(), r.at("index").get<int>(),
                            pose_from(r.at("pose")), r.at("image").get<std::string>()});
  }
  for (const auto& q : j.at("queries")) {
    QueryRecord rec;
    rec.sequence = q.at("sequence").get<int>();
    rec.index = q.at("index").get<int>();
    rec.pose = pose_from(q.at("pose"));
    rec.image = q.at("image").get<std::string>();
    rec.mask = q.at("mask").get<std::string>();
    rec.validation = q.at("split").get<std::string>() == "val";
    if (!q.at("oracle_index").is_null()) rec.oracle_index = q.at("oracle_index").get<int>();
    m.queries.push_back(rec);
  }
  for (const auto& c : j.at("changes")) {
    const auto& b = c.at("bbox");
    m.changes.push_back({parse_kind(c.at("kind").get<std::string>()),
                         c.at("object").get<int>(), b[0].get<Index>(),
                         b[1].get<Index>(), b[2].get<Index>(), b[3].get<Index>()});
  }
  return m;
}

struct Fnv {
  std::uint64_t h = 1469598103934665603ULL;
  void add(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  }
};

}  // namespace

void WorldSpec::validate() const {
  if (canvas_width < 1 || canvas_height < 1 || crop_size < 1) {
    throw std::invalid_argument("canvas and crop sizes must be positive");
  }
  if (sequences < 1 || frames_per_sequence < 1 || min_objects < 0 ||
      max_objects < min_objects || inserts < 0 || deletes < 0 || recolors < 0) {
    throw std::invalid_argument("world counts must be positive and ordered");
  }
  if (val_sequences < 0 || val_sequences > sequences) {
    throw std::invalid_argument("val_sequences out of range");
  }
  if (!(background_cell > 0)) throw std::invalid_argument("background_cell must be > 0");
  if (pixels_per_unit <= 0 || camera_step < 0 || camera_jitter < 0 ||
      scale_jitter < 0 || scale_jitter >= 1) {
    throw std::invalid_argument("invalid camera parameters");
  }
  const double reach = crop_reach(*this);
  const double last_x = path_x(*this, frames_per_sequence);
  if (2.0 * reach > static_cast<double>(canvas_height) ||
      last_x + reach > static_cast<double>(canvas_width)) {
    throw std::invalid_argument(detail::concat(
        "crop of ", crop_size, " px along the camera paths exceeds the ",
        canvas_width, "x", canvas_height, " canvas"));
  }
}

bool WorldObject::covers(double x, double y) const {
  const double dx = x - cx;
  const double dy = y - cy;
  if (kind == ShapeKind::kDisk) return dx * dx + dy * dy <= size * size;
  return std::abs(dx) <= size && std::abs(dy) <= size;
}

Canvas render_canvas(const WorldSpec& spec, const std::vector<WorldObject>& objects) {
  const Index w = spec.canvas_width;
  const Index h = spec.canvas_height;
  // Background: bilinear blend of a coarse random colour lattice plus a
  // static per-pixel texture. Both depend only on the seed.
  const double cell = spec.background_cell;
  const Index gx = static_cast<Index>(std::ceil(static_cast<double>(w) / cell)) + 1;
  const Index gy = static_cast<Index>(std::ceil(static_cast<double>(h) / cell)) + 1;
  Rng rng(splitmix64(spec.seed ^ 0xB4C6ULL));
  std::vector<Color> lattice(static_cast<std::size_t>(gx * gy));
  for (auto& c : lattice) {
    c = {static_cast<float>(rng.uniform(0.15, 0.85)),
         static_cast<float>(rng.uniform(0.15, 0.85)),
         static_cast<float>(rng.uniform(0.15, 0.85))};
  }
  Canvas canvas;
  canvas.rgb = Image(h, w);
  canvas.ids.assign(static_cast<std::size_t>(w * h), -1);
  for (Index y = 0; y < h; ++y) {
    const double fy = static_cast<double>(y) / cell;
    const Index ly = static_cast<Index>(fy);
    const double ty = fy - static_cast<double>(ly);
    for (Index x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x) / cell;
      const Index lx = static_cast<Index>(fx);
      const double tx = fx - static_cast<double>(lx);
      const auto& c00 = lattice[static_cast<std::size_t>(ly * gx + lx)];
      const auto& c01 = lattice[static_cast<std::size_t>(ly * gx + lx + 1)];
      const auto& c10 = lattice[static_cast<std::size_t>((ly + 1) * gx + lx)];
      const auto& c11 = lattice[static_cast<std::size_t>((ly + 1) * gx + lx + 1)];
      const float comps[3][4] = {{c00.r, c01.r, c10.r, c11.r},
                                 {c00.g, c01.g, c10.g, c11.g},
                                 {c00.b, c01.b, c10.b, c11.b}};
      for (Index c = 0; c < 3; ++c) {
        const double top = comps[c][0] * (1 - tx) + comps[c][1] * tx;
        const double bottom = comps[c][2] * (1 - tx) + comps[c][3] * tx;
        const double noise =
            spec.texture * (2.0 * counter_uniform(spec.seed, static_cast<std::uint64_t>(x),
                                                  static_cast<std::uint64_t>(y),
                                                  static_cast<std::uint64_t>(c)) -
                            1.0);
        canvas.rgb.at(c, y, x) =
            static_cast<float>(top * (1 - ty) + bottom * ty + noise);
      }
    }
  }
  for (const auto& o : objects) {
    const Index x0 = std::max<Index>(0, static_cast<Index>(std::floor(o.cx - o.size)));
    const Index x1 = std::min<Index>(w - 1, static_cast<Index>(std::ceil(o.cx + o.size)));
    const Index y0 = std::max<Index>(0, static_cast<Index>(std::floor(o.cy - o.size)));
    const Index y1 = std::min<Index>(h - 1, static_cast<Index>(std::ceil(o.cy + o.size)));
    for (Index y = y0; y <= y1; ++y) {
      for (Index x = x0; x <= x1; ++x) {
        if (!o.covers(static_cast<double>(x), static_cast<double>(y))) continue;
        canvas.rgb.at(0, y, x) = o.color.r;
        canvas.rgb.at(1, y, x) = o.color.g;
        canvas.rgb.at(2, y, x) = o.color.b;
        canvas.ids[static_cast<std::size_t>(y * w + x)] = o.id;
      }
    }
  }
  return canvas;
}

namespace {

struct CropGeometry {
  double left, top, step;
};

CropGeometry crop_geometry(const Canvas& canvas, const Pose& pose,
                           Index crop_size, double ppu) {
  if (!(pose.scale > 0)) throw std::invalid_argument("pose scale must be positive");
  const double side = static_cast<double>(crop_size) / pose.scale;
  const double cx = pose.x * ppu;
  const double cy = pose.y * ppu;
  CropGeometry g{cx - side / 2.0, cy - side / 2.0, side / static_cast<double>(crop_size)};
  const double first_x = g.left + 0.5 * g.step - 0.5;
  const double first_y = g.top + 0.5 * g.step - 0.5;
  const double last_x = first_x + (crop_size - 1) * g.step;
  const double last_y = first_y + (crop_size - 1) * g.step;
  if (first_x < 0 || first_y < 0 || last_x > static_cast<double>(canvas.width() - 1) ||
      last_y > static_cast<double>(canvas.height() - 1)) {
    throw std::out_of_range(detail::concat("crop at pose (", pose.x, ", ", pose.y,
                                           ") scale ", pose.scale,
                                           " leaves the canvas"));
  }
  return g;
}

}  // namespace

Image render_crop(const Canvas& canvas, const Pose& pose, Index crop_size,
                  double pixels_per_unit) {
  const CropGeometry g = crop_geometry(canvas, pose, crop_size, pixels_per_unit);
  Image out(crop_size, crop_size);
  for (Index v = 0; v < crop_size; ++v) {
    const double sy = g.top + (static_cast<double>(v) + 0.5) * g.step - 0.5;
    const Index y0 = static_cast<Index>(std::floor(sy));
    const double ty = sy - static_cast<double>(y0);
    const Index y1 = std::min(y0 + 1, canvas.height() - 1);
    for (Index u = 0; u < crop_size; ++u) {
      const double sx = g.left + (static_cast<double>(u) + 0.5) * g.step - 0.5;
      const Index x0 = static_cast<Index>(std::floor(sx));
      const double tx = sx - static_cast<double>(x0);
      const Index x1 = std::min(x0 + 1, canvas.width() - 1);
      for (Index c = 0; c < 3; ++c) {
        const double top = canvas.rgb.at(c, y0, x0) * (1 - tx) + canvas.rgb.at(c, y0, x1) * tx;
        const double bottom = canvas.rgb.at(c, y1, x0) * (1 - tx) + canvas.rgb.at(c, y1, x1) * tx;
        out.at(c, v, u) = quantize_level(static_cast<float>(top * (1 - ty) + bottom * ty));
      }
    }
  }
  return out;
}

Mask change_mask(const Canvas& before, const Canvas& after, const Pose& pose,
                 Index crop_size, double pixels_per_unit) {
  const CropGeometry g = crop_geometry(before, pose, crop_size, pixels_per_unit);
  Mask m(crop_size, crop_size);
  for (Index v = 0; v < crop_size; ++v) {
    const double sy = g.top + (static_cast<double>(v) + 0.5) * g.step - 0.5;
    const Index y = std::clamp<Index>(static_cast<Index>(std::lround(sy)), 0, before.height() - 1);
    for (Index u = 0; u < crop_size; ++u) {
      const double sx = g.left + (static_cast<double>(u) + 0.5) * g.step - 0.5;
      const Index x = std::clamp<Index>(static_cast<Index>(std::lround(sx)), 0, before.width() - 1);
      bool changed = before.id_at(x, y) != after.id_at(x, y);
      for (Index c = 0; c < 3 && !changed; ++c) {
        changed = before.rgb.at(c, y, x) != after.rgb.at(c, y, x);
      }
      m(v, u) = changed ? 1 : 0;
    }
  }
  return m;
}

World generate_world(const WorldSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  World world;
  world.manifest.spec = spec;

  const int count = static_cast<int>(rng.uniform_int(spec.min_objects, spec.max_objects));
  std::vector<WorldObject> objects;
  for (int i = 0; i < count; ++i) objects.push_back(random_object(i, spec, rng));

  std::vector<WorldObject> changed = objects;
  auto& changes = world.manifest.changes;
  for (int i = 0; i < spec.deletes && !changed.empty(); ++i) {
    const auto at = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(changed.size()) - 1));
    changes.push_back(footprint(ChangeKind::kDelete, changed[at], spec));
    changed.erase(changed.begin() + static_cast<std::ptrdiff_t>(at));
  }
  for (int i = 0; i < spec.recolors && !changed.empty(); ++i) {
    const auto at = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(changed.size()) - 1));
    Color c = random_color(rng);
    while (color_distance(c, changed[at].color) < 0.3f) c = random_color(rng);
    changed[at].color = c;
    changes.push_back(footprint(ChangeKind::kRecolor, changed[at], spec));
  }
  for (int i = 0; i < spec.inserts; ++i) {
    WorldObject o = random_object(count + i, spec, rng);
    changes.push_back(footprint(ChangeKind::kInsert, o, spec));
    changed.push_back(o);
  }

  world.before = render_canvas(spec, objects);
  world.after = render_canvas(spec, changed);

  for (int m = 0; m < spec.sequences; ++m) {
    const bool validation = m >= spec.sequences - spec.val_sequences;
    for (int j = 1; j <= spec.frames_per_sequence; ++j) {
      Pose pose;
      pose.x = path_x(spec, j) / spec.pixels_per_unit;
      pose.y = path_y(spec, m) / spec.pixels_per_unit;
      const std::string stem = frame_stem(m, j);
      world.manifest.references.push_back({m, j, pose, "t0/" + stem + ".ppm"});
      world.reference_images.push_back(
          render_crop(world.before, pose, spec.crop_size, spec.pixels_per_unit));

      QueryRecord q;
      q.sequence = m;
      q.index = j;
      q.pose = pose;
      q.validation = validation;
      if (spec.aligned()) {
        q.oracle_index = j;
      } else {
        q.pose.x += rng.uniform(-spec.camera_jitter, spec.camera_jitter);
        q.pose.y += rng.uniform(-spec.camera_jitter, spec.camera_jitter);
        q.pose.rotation += rng.uniform(-spec.rotation_jitter, spec.rotation_jitter);
        q.pose.scale = rng.uniform(1.0 - spec.scale_jitter, 1.0 + spec.scale_jitter);
      }
      q.image = "t1/" + stem + ".ppm";
      q.mask = "masks/" + stem + ".pgm";
      world.query_images.push_back(
          render_crop(world.after, q.pose, spec.crop_size, spec.pixels_per_unit));
      world.query_masks.push_back(change_mask(world.before, world.after, q.pose,
                                              spec.crop_size, spec.pixels_per_unit));
      world.manifest.queries.push_back(q);
    }
  }
  return world;
}

void write_world(const std::filesystem::path& dir, const World& world) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "t0");
  fs::create_directories(dir / "t1");
  fs::create_directories(dir / "masks");
  const auto& m = world.manifest;
  for (std::size_t i = 0; i < m.references.size(); ++i) {
    write_ppm(dir / m.references[i].image, world.reference_images[i]);
  }
  for (std::size_t i = 0; i < m.queries.size(); ++i) {
    write_ppm(dir / m.queries[i].image, world.query_images[i]);
    write_pgm(dir / m.queries[i].mask, world.query_masks[i]);
  }
  if (world.before.width() > 0) {
    write_ppm(dir / "canvas_t0.ppm", world.before.rgb);
    write_ppm(dir / "canvas_t1.ppm", world.after.rgb);
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << manifest_to_json(m).dump(2) << "\n";
}

World load_world(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing world manifest " + (dir / "manifest.json").string());
  World world;
  world.manifest = manifest_from_json(json::parse(in));
  for (const auto& r : world.manifest.references) {
    world.reference_images.push_back(read_ppm(dir / r.image));
  }
  for (const auto& q : world.manifest.queries) {
    world.query_images.push_back(read_ppm(dir / q.image));
    world.query_masks.push_back(read_pgm(dir / q.mask));
  }
  return world;
}

std::uint64_t world_hash(const World& world) {
  Fnv fnv;
  const std::string manifest = manifest_to_json(world.manifest).dump();
  fnv.add(manifest.data(), manifest.size());
  auto add_image = [&fnv](const Image& img) {
    for (Index c = 0; c < 3; ++c) {
      for (Index y = 0; y < img.height(); ++y) {
        for (Index x = 0; x < img.width(); ++x) {
          const std::uint8_t q = quantize(img.at(c, y, x));
          fnv.add(&q, 1);
        }
      }
    }
  };
  for (const auto& img : world.reference_images) add_image(img);
  for (const auto& img : world.query_images) add_image(img);
  for (const auto& mask : world.query_masks) fnv.add(mask.data(), static_cast<std::size_t>(mask.size()));
  return fnv.h;
}

std::vector<SourceSequence> source_sequences(const World& world,
                                             const Encoder& encoder) {
  std::vector<SourceSequence> out;
  std::map<int, std::size_t> slot;
  const auto& refs = world.manifest.references;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    auto it = slot.find(refs[i].sequence);
    if (it == slot.end()) {
      it = slot.emplace(refs[i].sequence, out.size()).first;
      out.push_back({refs[i].sequence, {}});
    }
    out[it->second].frames.push_back(
        {refs[i].pose, encoder.encode(world.reference_images[i]), refs[i].image});
  }
  return out;
}

}  // namespace ecd
