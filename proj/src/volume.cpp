#include "seg3d/volume.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace seg3d {

static_assert(std::endian::native == std::endian::little, "SVF I/O assumes a little-endian host");

namespace {

constexpr char kMagic[5] = {'S', 'V', 'F', '1', '\n'};

void check_dims(const Index3& dims) {
  for (int i = 0; i < 3; ++i)
    if (dims[i] < 1) throw DataError("dims must be positive, got " + std::to_string(dims[i]));
}

}  // namespace

void Volume::validate() const {
  check_dims(dims);
  if (!spacing.valid()) throw DataError("spacing must be positive and finite");
  if (static_cast<int64_t>(data.size()) != voxel_count())
    throw DataError("data length " + std::to_string(data.size()) + " does not match dims product " +
                    std::to_string(voxel_count()));
  for (float v : data)
    if (!std::isfinite(v)) throw DataError("volume contains non-finite intensities");
}

void SegmentationMap::validate() const {
  check_dims(dims);
  if (!spacing.valid()) throw DataError("spacing must be positive and finite");
  if (static_cast<int64_t>(labels.size()) != voxel_count())
    throw DataError("labels length " + std::to_string(labels.size()) +
                    " does not match dims product " + std::to_string(voxel_count()));
}

namespace {

struct SvfHeader {
  Index3 dims;
  Spacing spacing;
  std::string dtype;
};

SvfHeader parse_header(const std::string& text, const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": header is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw DataError(path.string() + ": header must be a JSON object");
  for (auto& [key, _] : j.items())
    if (key != "dims" && key != "spacing" && key != "dtype" && key != "layout")
      throw DataError(path.string() + ": unexpected header key '" + key + "'");
  for (const char* key : {"dims", "spacing", "dtype", "layout"})
    if (!j.contains(key)) throw DataError(path.string() + ": header missing key '" + std::string(key) + "'");

  SvfHeader h;
  auto dims = j["dims"];
  if (!dims.is_array() || dims.size() != 3)
    throw DataError(path.string() + ": dims must be an array of 3 integers");
  for (int i = 0; i < 3; ++i) {
    if (!dims[i].is_number_integer() || dims[i].get<int64_t>() < 1)
      throw DataError(path.string() + ": dims[" + std::to_string(i) + "] must be a positive integer");
    h.dims[i] = dims[i].get<int64_t>();
  }
  auto spacing = j["spacing"];
  if (!spacing.is_array() || spacing.size() != 3)
    throw DataError(path.string() + ": spacing must be an array of 3 reals");
  for (int i = 0; i < 3; ++i) {
    if (!spacing[i].is_number())
      throw DataError(path.string() + ": spacing[" + std::to_string(i) + "] must be a number");
    h.spacing[i] = spacing[i].get<double>();
  }
  if (!h.spacing.valid()) throw DataError(path.string() + ": spacing must be positive and finite");
  h.dtype = j["dtype"].get<std::string>();
  if (h.dtype != "f32" && h.dtype != "u8")
    throw DataError(path.string() + ": dtype must be \"f32\" or \"u8\", got \"" + h.dtype + "\"");
  if (j["layout"].get<std::string>() != "x-fastest")
    throw DataError(path.string() + ": layout must be \"x-fastest\"");
  return h;
}

}  // namespace

VolumeOrLabels read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());

  char magic[5];
  in.read(magic, 5);
  if (!in || std::memcmp(magic, kMagic, 5) != 0)
    throw DataError(path.string() + ": bad magic, not an SVF file");

  uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), 8);
  if (!in) throw DataError(path.string() + ": truncated header length");
  if (header_len == 0 || header_len > (1ull << 20))
    throw DataError(path.string() + ": implausible header length " + std::to_string(header_len));

  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw DataError(path.string() + ": truncated header");

  SvfHeader h = parse_header(header_text, path);
  const int64_t n = h.dims[0] * h.dims[1] * h.dims[2];

  if (h.dtype == "f32") {
    Volume v;
    v.dims = h.dims;
    v.spacing = h.spacing;
    v.data.resize(static_cast<size_t>(n));
    in.read(reinterpret_cast<char*>(v.data.data()), n * 4);
    if (!in) throw DataError(path.string() + ": payload shorter than dims product");
    if (in.peek() != EOF) throw DataError(path.string() + ": payload longer than dims product");
    v.validate();
    return v;
  }
  SegmentationMap m;
  m.dims = h.dims;
  m.spacing = h.spacing;
  m.labels.resize(static_cast<size_t>(n));
  in.read(reinterpret_cast<char*>(m.labels.data()), n);
  if (!in) throw DataError(path.string() + ": payload shorter than dims product");
  if (in.peek() != EOF) throw DataError(path.string() + ": payload longer than dims product");
  m.validate();
  return m;
}

Volume read_image(const std::filesystem::path& path) {
  auto v = read_volume(path);
  if (!std::holds_alternative<Volume>(v))
    throw DataError(path.string() + ": expected an f32 image volume, got a u8 label map");
  return std::get<Volume>(std::move(v));
}

SegmentationMap read_labels(const std::filesystem::path& path) {
  auto v = read_volume(path);
  if (!std::holds_alternative<SegmentationMap>(v))
    throw DataError(path.string() + ": expected a u8 label map, got an f32 image volume");
  return std::get<SegmentationMap>(std::move(v));
}

namespace {

void write_svf(const Index3& dims, const Spacing& spacing, const char* dtype, const void* payload,
               int64_t payload_bytes, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["dims"] = {dims[0], dims[1], dims[2]};
  j["spacing"] = {spacing[0], spacing[1], spacing[2]};
  j["dtype"] = dtype;
  j["layout"] = "x-fastest";
  const std::string header = j.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RunError("cannot open " + path.string() + " for writing");
  out.write(kMagic, 5);
  uint64_t header_len = header.size();
  out.write(reinterpret_cast<const char*>(&header_len), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(static_cast<const char*>(payload), payload_bytes);
  out.flush();
  if (!out) throw RunError("write failed for " + path.string());
}

}  // namespace

void write_volume(const Volume& v, const std::filesystem::path& path) {
  v.validate();
  write_svf(v.dims, v.spacing, "f32", v.data.data(), v.voxel_count() * 4, path);
}

void write_volume(const SegmentationMap& m, const std::filesystem::path& path) {
  m.validate();
  write_svf(m.dims, m.spacing, "u8", m.labels.data(), m.voxel_count(), path);
}

DatasetManifest load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open manifest " + manifest_path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path.string() + ": invalid JSON: " + e.what());
  }
  if (!j.contains("name") || !j["name"].is_string())
    throw DataError(manifest_path.string() + ": missing string key 'name'");
  if (!j.contains("cases") || !j["cases"].is_array() || j["cases"].empty())
    throw DataError(manifest_path.string() + ": 'cases' must be a non-empty array");

  const auto root = manifest_path.parent_path();
  DatasetManifest m;
  m.name = j["name"].get<std::string>();
  for (const auto& c : j["cases"]) {
    if (!c.is_object() || !c.contains("image") || !c["image"].is_string())
      throw DataError(manifest_path.string() + ": every case needs an 'image' path");
    DatasetManifest::Case entry;
    entry.image = (root / c["image"].get<std::string>()).string();
    if (c.contains("label")) {
      if (!c["label"].is_string()) throw DataError(manifest_path.string() + ": 'label' must be a string");
      entry.label = (root / c["label"].get<std::string>()).string();
    }
    m.cases.push_back(std::move(entry));
  }
  return m;
}

void DatasetFingerprint::validate() const {
  if (!median_spacing.valid()) throw DataError("fingerprint: median_spacing must be positive and finite");
  for (int i = 0; i < 3; ++i)
    if (median_shape[i] < 1) throw DataError("fingerprint: median_shape components must be >= 1");
  if (class_count < 2) throw DataError("fingerprint: class_count must be >= 2");
  if (case_count < 1) throw DataError("fingerprint: case_count must be >= 1");
}

namespace {

// even count: arithmetic mean of the two middle values
double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

DatasetFingerprint compute_fingerprint(const DatasetManifest& manifest) {
  struct CaseMeta {
    Index3 dims;
    Spacing spacing;
  };
  std::vector<CaseMeta> metas;
  std::array<bool, 256> seen{};

  for (const auto& c : manifest.cases) {
    Volume img = read_image(c.image);
    if (!c.label) throw DataError("case " + c.image + " has no label map; fingerprinting needs labels");
    SegmentationMap lab = read_labels(*c.label);
    if (lab.dims != img.dims)
      throw DataError("case " + c.image + ": image dims and label dims differ");
    for (uint8_t l : lab.labels) seen[l] = true;
    metas.push_back({img.dims, img.spacing});
  }

  int max_label = -1;
  for (int l = 255; l >= 0; --l)
    if (seen[l]) {
      max_label = l;
      break;
    }
  for (int l = 0; l <= max_label; ++l)
    if (!seen[l])
      throw DataError("labels are not consecutive from 0: value " + std::to_string(l) +
                      " never occurs but " + std::to_string(max_label) + " does");
  if (max_label < 1) throw DataError("dataset has no foreground labels (only background 0)");

  DatasetFingerprint fp;
  for (int axis = 0; axis < 3; ++axis) {
    std::vector<double> spacings;
    for (const auto& m : metas) spacings.push_back(m.spacing[axis]);
    fp.median_spacing[axis] = median_of(std::move(spacings));
  }
  for (int axis = 0; axis < 3; ++axis) {
    std::vector<double> shapes;
    for (const auto& m : metas) {
      // case extent re-expressed in median-spacing voxels
      int64_t s = round_half_up(static_cast<double>(m.dims[axis]) * m.spacing[axis] /
                                fp.median_spacing[axis]);
      shapes.push_back(static_cast<double>(std::max<int64_t>(1, s)));
    }
    fp.median_shape[axis] = std::max<int64_t>(1, round_half_up(median_of(std::move(shapes))));
  }
  fp.class_count = max_label + 1;
  fp.case_count = static_cast<int>(metas.size());
  fp.validate();
  return fp;
}

std::string fingerprint_to_json(const DatasetFingerprint& fp) {
  nlohmann::ordered_json j;
  j["median_spacing"] = {fp.median_spacing[0], fp.median_spacing[1], fp.median_spacing[2]};
  j["median_shape"] = {fp.median_shape[0], fp.median_shape[1], fp.median_shape[2]};
  j["class_count"] = fp.class_count;
  j["case_count"] = fp.case_count;
  return j.dump(2) + "\n";
}

DatasetFingerprint fingerprint_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid fingerprint JSON: ") + e.what());
  }
  DatasetFingerprint fp;
  try {
    for (int i = 0; i < 3; ++i) {
      fp.median_spacing[i] = j.at("median_spacing").at(i).get<double>();
      fp.median_shape[i] = j.at("median_shape").at(i).get<int64_t>();
    }
    fp.class_count = j.at("class_count").get<int>();
    fp.case_count = j.at("case_count").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid fingerprint JSON: ") + e.what());
  }
  fp.validate();
  return fp;
}

}  // namespace seg3d
