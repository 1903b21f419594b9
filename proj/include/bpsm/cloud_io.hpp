#pragma once

#include <filesystem>
#include <string>

#include "bpsm/pointcloud.hpp"
#include "bpsm/text_io.hpp"

namespace bpsm {

// Plain-text cloud files:
//   # bp-scanmatch cloud v1 source     rows: x,y
//   # bp-scanmatch cloud v1 surface    rows: x,y,nx,ny,valid

inline constexpr std::string_view kCloudHeader = "# bp-scanmatch cloud v1";

enum class CloudKind { kSource, kSurface };

inline CloudKind parse_cloud_kind(const std::string& header, const std::string& source) {
  const auto kind = text_io::trim(std::string_view(header).substr(kCloudHeader.size()));
  if (kind == "source") return CloudKind::kSource;
  if (kind == "surface") return CloudKind::kSurface;
  throw ParseError(source, 1, "unknown cloud kind '" + std::string(kind) + "'");
}

/// Kind declared by a cloud file header. An empty file counts as a source cloud.
inline CloudKind peek_cloud_kind(const std::filesystem::path& path) {
  const auto text = text_io::read_file(path);
  const auto eol = text.find('\n');
  const std::string first(text_io::trim(text.substr(0, eol)));
  if (first.empty()) return CloudKind::kSource;
  if (first.rfind(kCloudHeader, 0) != 0) {
    throw ParseError(path.string(), 1, "expected header '" + std::string(kCloudHeader) + "'");
  }
  return parse_cloud_kind(first, path.string());
}

inline SourceCloud parse_source_cloud(const std::string& text, const std::string& source = "<memory>") {
  const auto table = text_io::parse_table(text, kCloudHeader, 2, source);
  if (!table.header.empty() && parse_cloud_kind(table.header, source) != CloudKind::kSource) {
    throw ParseError(source, 1, "expected a source cloud");
  }
  SourceCloud cloud;
  cloud.points.reserve(table.rows.size());
  for (const auto& row : table.rows) cloud.points.emplace_back(row[0], row[1]);
  return cloud;
}

inline SurfaceCloud parse_surface_cloud(const std::string& text, const std::string& source = "<memory>") {
  const auto table = text_io::parse_table(text, kCloudHeader, 5, source);
  if (!table.header.empty() && parse_cloud_kind(table.header, source) != CloudKind::kSurface) {
    throw ParseError(source, 1, "expected a surface cloud");
  }
  SurfaceCloud cloud;
  std::size_t line = 2;
  for (const auto& row : table.rows) {
    if (row[4] != 0.0 && row[4] != 1.0) throw ParseError(source, line, "valid flag must be 0 or 1");
    cloud.points.emplace_back(row[0], row[1]);
    cloud.normals.emplace_back(row[2], row[3]);
    cloud.valid.push_back(row[4] == 1.0);
    ++line;
  }
  return cloud;
}

inline std::string format_cloud(const SourceCloud& cloud) {
  std::string out = std::string(kCloudHeader) + " source\n";
  for (const auto& p : cloud.points) {
    out += text_io::format_double(p.x()) + "," + text_io::format_double(p.y()) + "\n";
  }
  return out;
}

inline std::string format_cloud(const SurfaceCloud& cloud) {
  std::string out = std::string(kCloudHeader) + " surface\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    const auto& n = cloud.normals[i];
    out += text_io::format_double(p.x()) + "," + text_io::format_double(p.y()) + "," +
           text_io::format_double(n.x()) + "," + text_io::format_double(n.y()) + "," +
           (cloud.valid[i] ? "1" : "0") + "\n";
  }
  return out;
}

inline SourceCloud load_source_cloud(const std::filesystem::path& path) {
  return parse_source_cloud(text_io::read_file(path), path.string());
}

inline SurfaceCloud load_surface_cloud(const std::filesystem::path& path) {
  return parse_surface_cloud(text_io::read_file(path), path.string());
}

inline void save_cloud(const SourceCloud& cloud, const std::filesystem::path& path) {
  text_io::write_file(path, format_cloud(cloud));
}

inline void save_cloud(const SurfaceCloud& cloud, const std::filesystem::path& path) {
  text_io::write_file(path, format_cloud(cloud));
}

}  // namespace bpsm
