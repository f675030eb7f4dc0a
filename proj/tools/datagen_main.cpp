// Generates the procedural glyph datasets used by the pipeline at desk scale.

#include <CLI11.hpp>
#include <cstdint>
#include <iostream>

#include "mixttt/data.hpp"
#include "mixttt/errors.hpp"
#include "mixttt/synth.hpp"

int main(int argc, char** argv) {
  CLI::App app{"synthetic glyph dataset generator"};
  std::string out_train, out_test;
  std::size_t n_train = 2048, n_test = 512, classes = 10;
  std::uint64_t seed = 1;
  app.add_option("--out-train", out_train, "output path for the training split");
  app.add_option("--out-test", out_test, "output path for the test split");
  app.add_option("--n-train", n_train, "training sample count");
  app.add_option("--n-test", n_test, "test sample count");
  app.add_option("--classes", classes, "number of classes (1..10)");
  app.add_option("--seed", seed, "generator seed");
  CLI11_PARSE(app, argc, argv);

  try {
    if (out_train.empty() && out_test.empty())
      throw mixttt::ConfigError("nothing to do: pass --out-train and/or --out-test");
    if (!out_train.empty()) {
      const mixttt::Dataset train = mixttt::make_synthetic_dataset(n_train, seed, classes);
      mixttt::save_dataset(train, out_train);
      std::cout << "wrote " << train.size() << " training images to " << out_train << "\n";
    }
    if (!out_test.empty()) {
      // decorrelated from the training split
      const mixttt::Dataset test =
          mixttt::make_synthetic_dataset(n_test, mixttt::Rng::mix(seed, 0x7e57), classes);
      mixttt::save_dataset(test, out_test);
      std::cout << "wrote " << test.size() << " test images to " << out_test << "\n";
    }
  } catch (const mixttt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const mixttt::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
