#include "cptr/manifest.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cptr/error.hpp"

namespace cptr {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<const ManifestEntry*> Manifest::split(const std::string& name) const {
  std::vector<const ManifestEntry*> out;
  for (const ManifestEntry& e : images)
    if (e.split == name) out.push_back(&e);
  return out;
}

std::string Manifest::resolve(const ManifestEntry& e) const {
  if (base_dir.empty()) return e.path;
  return (fs::path(base_dir) / e.path).string();
}

void Manifest::validate() const {
  for (const ManifestEntry& e : images) {
    if (e.captions.empty()) throw ValueError("manifest image '" + e.path + "' has no captions");
    if (e.split != "train" && e.split != "val" && e.split != "test")
      throw ValueError("manifest image '" + e.path + "' has unknown split '" + e.split + "'");
  }
}

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  json j = json::parse(ss.str(), nullptr, false);
  if (j.is_discarded()) throw IoError("invalid JSON in manifest: " + path);
  if (!j.is_object() || !j.contains("images") || !j["images"].is_array())
    throw IoError("manifest must be an object with an 'images' array: " + path);
  Manifest m;
  m.base_dir = fs::path(path).parent_path().string();
  for (const json& img : j["images"]) {
    ManifestEntry e;
    e.path = img.at("path").get<std::string>();
    e.split = img.at("split").get<std::string>();
    for (const json& c : img.at("captions")) e.captions.push_back(c.get<std::string>());
    m.images.push_back(std::move(e));
  }
  m.validate();
  return m;
}

void save_manifest(const std::string& path, const Manifest& m) {
  m.validate();
  json imgs = json::array();
  for (const ManifestEntry& e : m.images)
    imgs.push_back(json{{"path", e.path}, {"split", e.split}, {"captions", e.captions}});
  const json j{{"images", imgs}};
  const fs::path target(path);
  const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest: " + path);
    out << j.dump(2) << '\n';
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw IoError("cannot finalize manifest " + path + ": " + ec.message());
}

}  // namespace cptr
