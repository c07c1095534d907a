#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "prosub/errors.hpp"
#include "prosub/graph.hpp"

namespace prosub {

// Architecture files are line-based structured text:
//   # comment
//   input <square spatial size>
//   classes <count>
//   layer kind=<k> in=<n> out=<n> [kernel=<n>] [stride=<n>] [prunable=0|1]
//         [tie_group=<id>] [from=<layer index>]
// Layers appear in execution order; `from` names the skip producer of a
// residual-add.

struct ArchFile {
  std::vector<LayerSpec> layers;
  int num_classes = 0;
  int input_hw = 32;
};

inline LayerKind parse_kind(const std::string& s, int line_no) {
  if (s == "conv2d") return LayerKind::Conv2d;
  if (s == "linear") return LayerKind::Linear;
  if (s == "batchnorm2d") return LayerKind::BatchNorm2d;
  if (s == "relu") return LayerKind::Relu;
  if (s == "avgpool2d") return LayerKind::AvgPool2d;
  if (s == "flatten") return LayerKind::Flatten;
  if (s == "residual-add") return LayerKind::ResidualAdd;
  throw FormatError("line " + std::to_string(line_no) + ": unknown layer kind '" + s + "'");
}

inline ArchFile parse_arch(std::istream& in) {
  ArchFile arch;
  std::string line;
  int line_no = 0;
  bool saw_classes = false;
  while (std::getline(in, line)) {
    ++line_no;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string head;
    if (!(ls >> head)) continue;
    if (head == "input") {
      if (!(ls >> arch.input_hw) || arch.input_hw < 1)
        throw FormatError("line " + std::to_string(line_no) + ": input needs a positive size");
    } else if (head == "classes") {
      if (!(ls >> arch.num_classes) || arch.num_classes < 2)
        throw FormatError("line " + std::to_string(line_no) + ": classes needs a count >= 2");
      saw_classes = true;
    } else if (head == "layer") {
      LayerSpec spec;
      bool saw_kind = false;
      std::string kv;
      while (ls >> kv) {
        std::size_t eq = kv.find('=');
        if (eq == std::string::npos)
          throw FormatError("line " + std::to_string(line_no) + ": expected key=value, got '" +
                            kv + "'");
        std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
        auto as_int = [&](const std::string& v) {
          try {
            return std::stoi(v);
          } catch (const std::exception&) {
            throw FormatError("line " + std::to_string(line_no) + ": '" + key +
                              "' needs an integer, got '" + v + "'");
          }
        };
        if (key == "kind") {
          spec.kind = parse_kind(value, line_no);
          saw_kind = true;
        } else if (key == "in") {
          spec.in_channels = as_int(value);
        } else if (key == "out") {
          spec.out_channels = as_int(value);
        } else if (key == "kernel") {
          spec.kernel = as_int(value);
        } else if (key == "stride") {
          spec.stride = as_int(value);
        } else if (key == "prunable") {
          spec.prunable = as_int(value) != 0;
        } else if (key == "tie_group") {
          spec.tie_group = value;
        } else if (key == "from") {
          spec.from = as_int(value);
        } else {
          throw FormatError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        }
      }
      if (!saw_kind)
        throw FormatError("line " + std::to_string(line_no) + ": layer record without a kind");
      arch.layers.push_back(spec);
    } else {
      throw FormatError("line " + std::to_string(line_no) + ": unknown directive '" + head +
                        "'");
    }
  }
  if (arch.layers.empty()) throw FormatError("architecture file lists no layers");
  if (!saw_classes) throw FormatError("architecture file is missing a classes directive");
  return arch;
}

inline ArchFile load_arch(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  try {
    return parse_arch(in);
  } catch (FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline void write_arch(std::ostream& out, const ArchFile& arch) {
  out << "input " << arch.input_hw << "\n";
  out << "classes " << arch.num_classes << "\n";
  for (const LayerSpec& l : arch.layers) {
    out << "layer kind=" << kind_name(l.kind) << " in=" << l.in_channels
        << " out=" << l.out_channels;
    if (l.kind == LayerKind::Conv2d) out << " kernel=" << l.kernel << " stride=" << l.stride;
    if (l.prunable) out << " prunable=1";
    if (!l.tie_group.empty()) out << " tie_group=" << l.tie_group;
    if (l.from >= 0) out << " from=" << l.from;
    out << "\n";
  }
}

inline void save_arch(const std::string& path, const ArchFile& arch) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  write_arch(out, arch);
}

inline ModelGraph build_from_arch(const ArchFile& arch, std::uint64_t seed) {
  ModelGraph m = build_model(arch.layers, arch.num_classes, seed);
  m.input_hw = arch.input_hw;
  return m;
}

// --- Desk architectures -------------------------------------------------------

namespace detail {

inline LayerSpec conv(int in, int out, int k, int s, bool prunable) {
  LayerSpec l;
  l.kind = LayerKind::Conv2d;
  l.in_channels = in;
  l.out_channels = out;
  l.kernel = k;
  l.stride = s;
  l.prunable = prunable;
  return l;
}

inline LayerSpec plain(LayerKind kind, int c) {
  LayerSpec l;
  l.kind = kind;
  l.in_channels = c;
  l.out_channels = c;
  return l;
}

inline LayerSpec linear(int in, int out, bool prunable) {
  LayerSpec l;
  l.kind = LayerKind::Linear;
  l.in_channels = in;
  l.out_channels = out;
  l.prunable = prunable;
  return l;
}

inline LayerSpec res_add(int c, int from) {
  LayerSpec l;
  l.kind = LayerKind::ResidualAdd;
  l.in_channels = c;
  l.out_channels = c;
  l.from = from;
  return l;
}

}  // namespace detail

// Three prunable convs with BN + ReLU, global pool, linear classifier.
inline ArchFile convnet6(int classes, int input_hw = 32, int in_channels = 3) {
  using namespace detail;
  ArchFile a;
  a.num_classes = classes;
  a.input_hw = input_hw;
  a.layers = {
      conv(in_channels, 16, 3, 1, true),
      plain(LayerKind::BatchNorm2d, 16),
      plain(LayerKind::Relu, 16),
      conv(16, 32, 3, 2, true),
      plain(LayerKind::BatchNorm2d, 32),
      plain(LayerKind::Relu, 32),
      conv(32, 32, 3, 1, true),
      plain(LayerKind::BatchNorm2d, 32),
      plain(LayerKind::Relu, 32),
      plain(LayerKind::AvgPool2d, 32),
      plain(LayerKind::Flatten, 32),
      linear(32, classes, false),
  };
  return a;
}

// Stem conv plus two identity-shortcut blocks; the adds tie the stem and both
// block outputs into one pruning unit.
inline ArchFile resnet8(int classes, int input_hw = 32, int in_channels = 3) {
  using namespace detail;
  ArchFile a;
  a.num_classes = classes;
  a.input_hw = input_hw;
  a.layers = {
      conv(in_channels, 16, 3, 1, true),   // 0 stem
      plain(LayerKind::BatchNorm2d, 16),   // 1
      plain(LayerKind::Relu, 16),          // 2
      conv(16, 16, 3, 1, true),            // 3 block 1
      plain(LayerKind::BatchNorm2d, 16),   // 4
      res_add(16, 2),                      // 5 joins stem + block 1
      plain(LayerKind::Relu, 16),          // 6
      conv(16, 16, 3, 1, true),            // 7 block 2
      plain(LayerKind::BatchNorm2d, 16),   // 8
      res_add(16, 6),                      // 9 joins block 1 + block 2
      plain(LayerKind::Relu, 16),          // 10
      conv(16, 32, 3, 2, true),            // 11 head conv, untied
      plain(LayerKind::BatchNorm2d, 32),   // 12
      plain(LayerKind::Relu, 32),          // 13
      plain(LayerKind::AvgPool2d, 32),     // 14
      plain(LayerKind::Flatten, 32),       // 15
      linear(32, classes, false),          // 16
  };
  return a;
}

}  // namespace prosub
