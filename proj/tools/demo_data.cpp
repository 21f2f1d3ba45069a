// Writes three small demo images plus scripted mock-backend answers for them.

#include <iostream>

#include <CLI11.hpp>

#include "engine_fixtures.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write demo images and mock scene scripts"};
  std::string out;
  app.add_option("out", out, "Destination directory")->required();
  CLI11_PARSE(app, argc, argv);
  try {
    fixtures::write_fixtures(out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cout << out << "/images and " << out << "/scenes written\n";
  return 0;
}
