#ifndef LUNGCAD_NVOL_HPP
#define LUNGCAD_NVOL_HPP

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "lungcad/segmentation.hpp"
#include "lungcad/volume.hpp"

namespace lungcad {

// NVOL: a JSON sidecar (<base>.json) describing geometry, unit and dtype, plus
// a raw little-endian payload (<base>.raw) in x-fastest order.
enum class NvolDtype { F32, U8 };

struct NvolFile {
  VolumeF volume;
  nlohmann::json header;  // full sidecar, including any extra fields
};

void write_nvol(const std::filesystem::path& base, const VolumeF& v,
                const nlohmann::json& extra = nlohmann::json::object(), NvolDtype dtype = NvolDtype::F32);
NvolFile read_nvol(const std::filesystem::path& base);

void write_mask(const std::filesystem::path& base, const Mask& m);
Mask read_mask(const std::filesystem::path& base);

// Little-endian helpers shared by the binary formats.
void write_f32_le(std::ostream& os, const float* data, std::size_t n);
void read_f32_le(std::istream& is, float* data, std::size_t n);
void write_u64_le(std::ostream& os, std::uint64_t v);
std::uint64_t read_u64_le(std::istream& is);

void write_text_file(const std::filesystem::path& p, const std::string& text);
std::string read_text_file(const std::filesystem::path& p);

// Shortest decimal text that parses back to the same double.
std::string format_number(double v);
double parse_number(const std::string& s);

// Plain comma-separated tables without quoting; the first line is the header.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
};

CsvTable read_csv(const std::filesystem::path& p);
void write_csv(const std::filesystem::path& p, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

}  // namespace lungcad

#endif  // LUNGCAD_NVOL_HPP
