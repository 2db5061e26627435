// Copyright 2026 The Shipyard Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef SHIPYARD_PATCH_HPP
#define SHIPYARD_PATCH_HPP

#include <cstdlib>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace shipyard {

class PatchError : public std::runtime_error {
public:
  explicit PatchError(const std::string& what) : std::runtime_error(what) {}
};

struct HunkLine {
  char op;  // ' ', '-' or '+'
  std::string text;
  bool no_newline = false;  // followed by "\ No newline at end of file"
};

struct Hunk {
  std::size_t old_start = 0;
  std::size_t old_count = 0;
  std::size_t new_start = 0;
  std::size_t new_count = 0;
  std::vector<HunkLine> lines;
};

struct FilePatch {
  std::string old_path;
  std::string new_path;
  std::vector<Hunk> hunks;

  bool creates() const { return old_path == "/dev/null"; }
  bool deletes() const { return new_path == "/dev/null"; }
};

namespace detail {

inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) {
      out.push_back(text.substr(pos));
      break;
    }
    out.push_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  return out;
}

inline std::string header_path(std::string_view rest) {
  // Drop a trailing timestamp separated by a tab.
  std::size_t tab = rest.find('\t');
  if (tab != std::string_view::npos) rest = rest.substr(0, tab);
  while (!rest.empty() && (rest.back() == '\r' || rest.back() == ' ')) rest.remove_suffix(1);
  return std::string(rest);
}

inline std::size_t parse_number(std::string_view s, std::size_t& pos) {
  std::size_t start = pos;
  while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') ++pos;
  if (start == pos) throw PatchError("malformed hunk header '" + std::string(s) + "'");
  return std::strtoull(std::string(s.substr(start, pos - start)).c_str(), nullptr, 10);
}

inline Hunk parse_hunk_header(std::string_view line) {
  // @@ -a[,b] +c[,d] @@
  Hunk h;
  if (line.size() < 4 || line.substr(0, 4) != "@@ -") {
    throw PatchError("malformed hunk header '" + std::string(line) + "'");
  }
  std::size_t pos = 4;
  h.old_start = parse_number(line, pos);
  h.old_count = 1;
  if (pos < line.size() && line[pos] == ',') {
    ++pos;
    h.old_count = parse_number(line, pos);
  }
  if (line.substr(pos, 2) != " +") {
    throw PatchError("malformed hunk header '" + std::string(line) + "'");
  }
  pos += 2;
  h.new_start = parse_number(line, pos);
  h.new_count = 1;
  if (pos < line.size() && line[pos] == ',') {
    ++pos;
    h.new_count = parse_number(line, pos);
  }
  if (line.substr(pos, 3) != " @@") {
    throw PatchError("malformed hunk header '" + std::string(line) + "'");
  }
  return h;
}

}  // namespace detail

// Parses a unified diff (plain or git-style). Lines outside file sections
// are ignored; anything malformed inside a hunk throws PatchError.
inline std::vector<FilePatch> parse_unified_diff(std::string_view text) {
  auto lines = detail::split_lines(text);
  std::vector<FilePatch> files;
  std::size_t i = 0;
  while (i < lines.size()) {
    std::string_view line = lines[i];
    if (!line.starts_with("--- ") || i + 1 >= lines.size() || !lines[i + 1].starts_with("+++ ")) {
      ++i;
      continue;
    }
    FilePatch fp;
    fp.old_path = detail::header_path(line.substr(4));
    fp.new_path = detail::header_path(lines[i + 1].substr(4));
    i += 2;
    while (i < lines.size() && lines[i].starts_with("@@ ")) {
      Hunk h = detail::parse_hunk_header(lines[i]);
      ++i;
      std::size_t old_seen = 0;
      std::size_t new_seen = 0;
      while (old_seen < h.old_count || new_seen < h.new_count) {
        if (i >= lines.size()) throw PatchError("truncated hunk in " + fp.new_path);
        std::string_view body = lines[i];
        if (!body.empty() && body.back() == '\r') body.remove_suffix(1);
        char op = body.empty() ? ' ' : body[0];
        std::string_view payload = body.empty() ? body : body.substr(1);
        if (op == '\\') {
          if (h.lines.empty()) throw PatchError("stray no-newline marker in " + fp.new_path);
          h.lines.back().no_newline = true;
          ++i;
          continue;
        }
        if (op != ' ' && op != '-' && op != '+') {
          throw PatchError("unexpected line in hunk of " + fp.new_path + ": '" + std::string(body) + "'");
        }
        if (op != '+') ++old_seen;
        if (op != '-') ++new_seen;
        if (old_seen > h.old_count || new_seen > h.new_count) {
          throw PatchError("hunk line counts do not match header in " + fp.new_path);
        }
        h.lines.push_back({op, std::string(payload), false});
        ++i;
      }
      if (i < lines.size() && lines[i].starts_with("\\")) {
        if (!h.lines.empty()) h.lines.back().no_newline = true;
        ++i;
      }
      fp.hunks.push_back(std::move(h));
    }
    if (fp.hunks.empty() && !fp.creates() && !fp.deletes()) {
      throw PatchError("file section without hunks for " + fp.new_path);
    }
    files.push_back(std::move(fp));
  }
  if (files.empty()) {
    throw PatchError("no file sections found in patch");
  }
  return files;
}

// Path -> file contents.
using FileTree = std::map<std::string, std::string>;

inline std::string strip_components(const std::string& path, int strip) {
  std::size_t pos = 0;
  for (int k = 0; k < strip; ++k) {
    std::size_t slash = path.find('/', pos);
    if (slash == std::string::npos) return path.substr(pos);
    pos = slash + 1;
  }
  return path.substr(pos);
}

namespace detail {

struct TextFile {
  std::vector<std::string> lines;
  bool trailing_newline = true;

  static TextFile from(const std::string& content) {
    TextFile f;
    for (auto v : split_lines(content)) f.lines.emplace_back(v);
    f.trailing_newline = content.empty() || content.back() == '\n';
    return f;
  }

  std::string str() const {
    std::string out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      out += lines[i];
      if (i + 1 < lines.size() || trailing_newline) out += '\n';
    }
    return out;
  }
};

inline bool hunk_matches_at(const TextFile& f, const Hunk& h, std::size_t at) {
  std::size_t k = at;
  for (const auto& l : h.lines) {
    if (l.op == '+') continue;
    if (k >= f.lines.size() || f.lines[k] != l.text) return false;
    ++k;
  }
  return true;
}

}  // namespace detail

// Applies `patch` to `tree` with exact context matching: a hunk may land at
// an offset from its stated line, but every context and removed line must
// match byte for byte (no fuzz). Either all files apply or `tree` is left
// untouched.
inline void apply_patch(FileTree& tree, const std::vector<FilePatch>& patch, int strip = 1) {
  FileTree work = tree;
  for (const auto& fp : patch) {
    const std::string old_name = strip_components(fp.old_path, strip);
    const std::string new_name = strip_components(fp.new_path, strip);
    const std::string& name = fp.creates() ? new_name : old_name;

    detail::TextFile file;
    if (fp.creates()) {
      if (work.count(name) != 0) throw PatchError(name + ": file already exists");
    } else {
      auto it = work.find(name);
      if (it == work.end()) throw PatchError(name + ": no such file");
      file = detail::TextFile::from(it->second);
    }

    std::ptrdiff_t shift = 0;
    std::size_t hunk_no = 0;
    for (const auto& h : fp.hunks) {
      ++hunk_no;
      std::size_t stated = h.old_start == 0 ? 0 : h.old_start - 1;
      std::ptrdiff_t wanted = static_cast<std::ptrdiff_t>(stated) + shift;
      std::optional<std::size_t> at;
      const std::ptrdiff_t limit = static_cast<std::ptrdiff_t>(file.lines.size());
      for (std::ptrdiff_t delta = 0; delta <= limit && !at; ++delta) {
        for (std::ptrdiff_t cand : {wanted - delta, wanted + delta}) {
          if (cand < 0 || cand > limit) continue;
          if (detail::hunk_matches_at(file, h, static_cast<std::size_t>(cand))) {
            at = static_cast<std::size_t>(cand);
            break;
          }
        }
      }
      if (!at) {
        throw PatchError(name + ": hunk #" + std::to_string(hunk_no) + " FAILED at " +
                         std::to_string(h.old_start));
      }
      std::vector<std::string> replacement;
      std::size_t removed = 0;
      bool ends_without_newline = false;
      for (const auto& l : h.lines) {
        if (l.op != '+') ++removed;
        if (l.op != '-') {
          replacement.push_back(l.text);
          ends_without_newline = l.no_newline;
        }
      }
      const bool touches_end = *at + removed == file.lines.size();
      file.lines.erase(file.lines.begin() + static_cast<std::ptrdiff_t>(*at),
                       file.lines.begin() + static_cast<std::ptrdiff_t>(*at + removed));
      file.lines.insert(file.lines.begin() + static_cast<std::ptrdiff_t>(*at), replacement.begin(),
                        replacement.end());
      if (touches_end) file.trailing_newline = !ends_without_newline;
      shift += static_cast<std::ptrdiff_t>(replacement.size()) - static_cast<std::ptrdiff_t>(removed);
    }

    if (fp.deletes()) {
      if (!file.lines.empty()) throw PatchError(name + ": delete leaves content behind");
      work.erase(name);
    } else {
      if (!fp.creates() && new_name != old_name) work.erase(old_name);
      work[fp.creates() ? name : new_name] = file.str();
    }
  }
  tree = std::move(work);
}

inline void apply_patch(FileTree& tree, std::string_view diff_text, int strip = 1) {
  apply_patch(tree, parse_unified_diff(diff_text), strip);
}

}  // namespace shipyard

#endif  // SHIPYARD_PATCH_HPP
