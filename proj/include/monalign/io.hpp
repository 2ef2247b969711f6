// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"
#include "monalign/error.hpp"

namespace monalign::io {

/// Formats a double with 17 significant digits (lossless round trip).
inline std::string format_real(double value) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

namespace detail {

inline void write_json(std::ostream& out, const nlohmann::json& value) {
  using nlohmann::json;
  switch (value.type()) {
    case json::value_t::object: {
      out << '{';
      bool first = true;
      for (const auto& [key, item] : value.items()) {
        if (!first) out << ',';
        first = false;
        out << json(key).dump() << ':';
        write_json(out, item);
      }
      out << '}';
      break;
    }
    case json::value_t::array: {
      out << '[';
      bool first = true;
      for (const auto& item : value) {
        if (!first) out << ',';
        first = false;
        write_json(out, item);
      }
      out << ']';
      break;
    }
    case json::value_t::number_float:
      out << format_real(value.get<double>());
      break;
    default:
      out << value.dump();
  }
}

}  // namespace detail

/// Serializes JSON with every floating-point number written at 17
/// significant digits. Object keys keep nlohmann's sorted order, so the
/// output is a deterministic function of the document.
inline std::string dump_json(const nlohmann::json& value) {
  std::ostringstream out;
  detail::write_json(out, value);
  return out.str();
}

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << contents;
  out.close();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("cannot parse '" + path.string() + "': " + e.what());
  }
}

/// Fails when the directory that would contain `path` does not exist.
inline void require_parent_dir(const std::filesystem::path& path) {
  auto parent = path.parent_path();
  if (parent.empty()) return;
  if (!std::filesystem::is_directory(parent)) {
    throw IoError("parent directory of '" + path.string() +
                  "' does not exist");
  }
}

}  // namespace monalign::io
