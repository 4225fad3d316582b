// Writes the tinynet-3class fixture: model, weight blobs, the three class
// images and a checksum list.
//
//   make_fixtures [out_dir]      (default: ./fixtures)

#include <cstdio>
#include <fstream>
#include <iostream>

#include "inv/fixtures.hpp"
#include "inv/hash.hpp"

int main(int argc, char** argv) {
  namespace fs = std::filesystem;
  const fs::path out = argc > 1 ? argv[1] : "fixtures";
  try {
    const auto model = inv::fixtures::tinynet_3class();
    inv::save_model(model, out / "tinynet-3class");
    for (std::size_t c = 0; c < inv::fixtures::kClassNames.size(); ++c) {
      inv::write_ppm(out / "images" / (inv::fixtures::kClassNames[c] + ".ppm"), inv::fixtures::synthetic_image(c));
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(out)) {
      if (e.is_regular_file() && e.path().filename() != "CHECKSUMS") files.push_back(fs::relative(e.path(), out));
    }
    std::sort(files.begin(), files.end());
    std::ofstream sums(out / "CHECKSUMS");
    for (const auto& f : files) {
      const auto bytes = inv::read_bytes(out / f);
      inv::Fnv1a64 h;
      h.update(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
      sums << inv::hex64(h.digest()) << "  " << f.generic_string() << "\n";
    }
    std::cout << "wrote " << files.size() << " fixture files to " << out << "\n";
  } catch (const std::exception& e) {
    std::cerr << "make_fixtures: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
