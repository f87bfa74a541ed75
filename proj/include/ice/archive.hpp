#ifndef ICE_ARCHIVE_HPP
#define ICE_ARCHIVE_HPP

// Multi-tensor .npz-style archives: a zip whose "<name>.npy" members are tensors.
// Other members (e.g. "explainer.json") are carried as raw text.

#include "ice/npy.hpp"
#include "ice/zip.hpp"

#include <filesystem>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

namespace ice {

/// An archive member the caller needs is absent.
class MissingMemberError : public IoError {
 public:
  MissingMemberError(const std::string& member, const std::string& archive)
      : IoError("archive '" + archive + "' is missing required member '" + member + "'"), member_(member) {}
  const std::string& member() const { return member_; }

 private:
  std::string member_;
};

struct Archive {
  std::string source;  // path or label, used in error messages
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> texts;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  const Tensor& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw MissingMemberError(name, source);
    return it->second;
  }

  const std::string& text(const std::string& name) const {
    auto it = texts.find(name);
    if (it == texts.end()) throw MissingMemberError(name, source);
    return it->second;
  }

  void require(std::initializer_list<std::string> names) const {
    for (const auto& n : names) (void)tensor(n);
  }
};

inline Archive decode_archive(std::span<const unsigned char> bytes, const std::string& source = "<memory>") {
  Archive a;
  a.source = source;
  for (auto& m : unzip(bytes)) {
    const std::filesystem::path p(m.name);
    if (p.extension() == ".npy") {
      try {
        a.tensors.emplace(p.stem().string(), decode_npy(m.bytes));
      } catch (const TensorFormatError& e) {
        throw TensorFormatError(e.kind(), "member '" + m.name + "' of '" + source + "': " + e.what());
      }
    } else {
      a.texts.emplace(m.name, std::string(m.bytes.begin(), m.bytes.end()));
    }
  }
  return a;
}

inline std::vector<unsigned char> encode_archive(const Archive& a, bool compress = true) {
  // texts first, then tensors; both in name order
  std::vector<ZipMember> members;
  for (const auto& [name, text] : a.texts) members.push_back({name, {text.begin(), text.end()}});
  for (const auto& [name, t] : a.tensors) members.push_back({name + ".npy", encode_npy(t)});
  return zip(members, compress);
}

inline Archive load_archive(const std::filesystem::path& path) {
  return decode_archive(read_file_bytes(path), path.string());
}

inline void save_archive(const Archive& a, const std::filesystem::path& path, bool compress = true) {
  write_file_bytes(path, encode_archive(a, compress));
}

/// Tensors of an archive keyed by member name without extension.
inline std::map<std::string, Tensor> read_archive(const std::filesystem::path& path,
                                                  std::initializer_list<std::string> required = {}) {
  Archive a = load_archive(path);
  a.require(required);
  return std::move(a.tensors);
}

inline void write_archive(const std::map<std::string, Tensor>& tensors, const std::filesystem::path& path,
                          bool compress = true) {
  Archive a;
  a.tensors = tensors;
  save_archive(a, path, compress);
}

}  // namespace ice

#endif  // ICE_ARCHIVE_HPP
