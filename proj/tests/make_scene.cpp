// Writes the synthetic box scene to disk as PNGs plus a scene manifest.
//   make_scene <dir> [circle|heldout|hemisphere] [size]
#include <cstdio>
#include <cstdlib>
#include <string>

#include "synthetic.hpp"

int main(int argc, char** argv) {
  using namespace marf;
  if (argc < 2) {
    std::fprintf(stderr, "usage: make_scene <dir> [circle|heldout|hemisphere] [size]\n");
    return 1;
  }
  const std::string kind = argc > 2 ? argv[2] : "circle";
  const int size = argc > 3 ? std::atoi(argv[3]) : 64;
  TrainingSet set;
  if (kind == "circle") {
    set = testing::circle_scene({}, size).train;
  } else if (kind == "heldout") {
    set = testing::circle_scene({}, size).heldout;
  } else if (kind == "hemisphere") {
    set = testing::hemisphere_scene({}, size);
  } else {
    std::fprintf(stderr, "unknown scene '%s'\n", kind.c_str());
    return 1;
  }
  std::printf("%s\n", testing::write_scene(set, argv[1]).string().c_str());
}
