#include "lungcad/nvol.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <vector>

namespace lungcad {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Unit u) {
  switch (u) {
    case Unit::RawDetector: return "raw";
    case Unit::Hounsfield: return "hounsfield";
    case Unit::Luminance: return "luminance";
  }
  return "raw";
}

Unit unit_from_string(const std::string& s) {
  if (s == "raw") return Unit::RawDetector;
  if (s == "hounsfield") return Unit::Hounsfield;
  if (s == "luminance") return Unit::Luminance;
  throw InvalidArgument("unknown unit '" + s + "'");
}

void write_f32_le(std::ostream& os, const float* data, std::size_t n) {
  std::vector<unsigned char> buf(n * 4);
  for (std::size_t i = 0; i < n; ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(data[i]);
    for (int b = 0; b < 4; ++b) buf[i * 4 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void read_f32_le(std::istream& is, float* data, std::size_t n) {
  std::vector<unsigned char> buf(n * 4);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) throw IoError("truncated float payload");
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= std::uint32_t(buf[i * 4 + b]) << (8 * b);
    data[i] = std::bit_cast<float>(bits);
  }
}

void write_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (is.gcount() != 8) throw IoError("truncated integer");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

void write_text_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write " + p.string());
  os << text;
  if (!os) throw IoError("failed writing " + p.string());
}

std::string read_text_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string format_number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

double parse_number(const std::string& s) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw InvalidArgument("not a number: '" + s + "'");
  return v;
}

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw InvalidArgument("csv has no column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

CsvTable read_csv(const fs::path& p) {
  std::istringstream is(read_text_file(p));
  CsvTable t;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_fields(line);
    if (first) {
      t.header = std::move(fields);
      first = false;
      continue;
    }
    if (fields.size() != t.header.size())
      throw IoError(p.string() + ": row has " + std::to_string(fields.size()) + " fields, header has " +
                    std::to_string(t.header.size()));
    t.rows.push_back(std::move(fields));
  }
  if (first) throw IoError(p.string() + ": empty csv");
  return t;
}

void write_csv(const fs::path& p, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::string text;
  auto emit = [&](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) text += ',';
      text += fields[i];
    }
    text += '\n';
  };
  emit(header);
  for (const auto& r : rows) emit(r);
  write_text_file(p, text);
}

namespace {

fs::path sidecar(const fs::path& base) { return fs::path(base.string() + ".json"); }
fs::path payload(const fs::path& base) { return fs::path(base.string() + ".raw"); }

json grid_json(const Grid& g) {
  return json{{"dims", {g.dims[0], g.dims[1], g.dims[2]}},
              {"spacing_mm", {g.spacing_mm[0], g.spacing_mm[1], g.spacing_mm[2]}},
              {"origin_mm", {g.origin_mm[0], g.origin_mm[1], g.origin_mm[2]}}};
}

Grid grid_from_json(const json& j) {
  Grid g;
  for (int a = 0; a < 3; ++a) {
    g.dims[a] = j.at("dims").at(a).get<Index>();
    g.spacing_mm[a] = j.at("spacing_mm").at(a).get<double>();
    g.origin_mm[a] = j.at("origin_mm").at(a).get<double>();
  }
  g.validate();
  return g;
}

}  // namespace

void write_nvol(const fs::path& base, const VolumeF& v, const json& extra, NvolDtype dtype) {
  json h = grid_json(v.grid);
  h["unit"] = to_string(v.unit);
  h["dtype"] = dtype == NvolDtype::F32 ? "f32le" : "u8";
  h["data_file"] = payload(base).filename().string();
  for (const auto& [k, val] : extra.items()) h[k] = val;
  write_text_file(sidecar(base), h.dump(2) + "\n");

  std::ofstream os(payload(base), std::ios::binary);
  if (!os) throw IoError("cannot write " + payload(base).string());
  if (dtype == NvolDtype::F32) {
    write_f32_le(os, v.data.data(), static_cast<std::size_t>(v.size()));
  } else {
    std::vector<unsigned char> bytes(v.size());
    for (Index i = 0; i < v.size(); ++i)
      bytes[i] = static_cast<unsigned char>(std::clamp(std::lround(v.data[i]), 0L, 255L));
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  if (!os) throw IoError("failed writing " + payload(base).string());
}

NvolFile read_nvol(const fs::path& base) {
  NvolFile f;
  try {
    f.header = json::parse(read_text_file(sidecar(base)));
    f.volume.grid = grid_from_json(f.header);
    f.volume.unit = unit_from_string(f.header.at("unit").get<std::string>());
  } catch (const json::exception& e) {
    throw IoError("malformed NVOL header " + sidecar(base).string() + ": " + e.what());
  }
  const std::string dtype = f.header.value("dtype", "f32le");
  std::ifstream is(payload(base), std::ios::binary);
  if (!is) throw IoError("cannot read " + payload(base).string());
  f.volume.data.resize(f.volume.grid.size());
  if (dtype == "f32le") {
    read_f32_le(is, f.volume.data.data(), static_cast<std::size_t>(f.volume.size()));
  } else if (dtype == "u8") {
    std::vector<unsigned char> bytes(f.volume.size());
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(is.gcount()) != bytes.size()) throw IoError("truncated u8 payload");
    for (Index i = 0; i < f.volume.size(); ++i) f.volume.data[i] = float(bytes[i]);
  } else {
    throw IoError("unsupported NVOL dtype " + dtype);
  }
  return f;
}

void write_mask(const fs::path& base, const Mask& m) {
  VolumeF v(m.grid, Unit::RawDetector);
  v.data = m.bits.cast<float>();
  write_nvol(base, v);
}

Mask read_mask(const fs::path& base) {
  const NvolFile f = read_nvol(base);
  Mask m(f.volume.grid);
  m.bits = f.volume.data > 0.5f;
  return m;
}

}  // namespace lungcad
