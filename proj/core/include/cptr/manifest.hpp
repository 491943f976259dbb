#pragma once

#include <string>
#include <vector>

namespace cptr {

struct ManifestEntry {
  std::string path; // relative to the manifest file's directory
  std::string split; // train | val | test
  std::vector<std::string> captions;

  bool operator==(const ManifestEntry&) const = default;
};

// Dataset manifest in the usual three-way split layout.
struct Manifest {
  std::vector<ManifestEntry> images;
  std::string base_dir; // set on load; image paths resolve against it

  std::vector<const ManifestEntry*> split(const std::string& name) const;
  std::string resolve(const ManifestEntry& e) const;
  void validate() const;
};

Manifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const Manifest& m);

}  // namespace cptr
