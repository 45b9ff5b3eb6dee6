// Sequentially trains the toy run matrix into an artifact directory,
// skipping runs whose artifacts already match the current configuration.
// Used to pre-bake the artifacts the acceptance gate and the report
// consume; safe to re-run at any time.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <exception>
#include <string>

#include "gradsplit/experiments.hpp"
#include "gradsplit/hostblas.hpp"

using namespace gradsplit;

int main(int argc, char** argv) {
    pin_host_blas_kernel(argv);

    std::string out;
    int seeds = 5;
    std::string filter;
    for (int i = 1; i < argc; ++i) {
        std::string a = argv[i];
        auto next = [&]() -> std::string {
            if (i + 1 >= argc) {
                std::fprintf(stderr, "missing value after %s\n", a.c_str());
                std::exit(2);
            }
            return argv[++i];
        };
        if (a == "--out")
            out = next();
        else if (a == "--seeds")
            seeds = std::stoi(next());
        else if (a == "--filter")
            filter = next();
        else {
            std::fprintf(stderr, "usage: run_toys --out DIR [--seeds N] [--filter SUBSTR]\n");
            return 2;
        }
    }
    if (out.empty()) {
        std::fprintf(stderr, "usage: run_toys --out DIR [--seeds N] [--filter SUBSTR]\n");
        return 2;
    }

    int failures = 0;
    for (const ToyRunSpec& spec : toy_matrix(seeds)) {
        std::string name = toy_run_name(spec);
        if (!filter.empty() && name.find(filter) == std::string::npos) continue;
        auto t0 = std::chrono::steady_clock::now();
        try {
            ToyRunResult r = run_toy<float>(spec, out);
            double set_acc = toy_checkpoint_first_output_accuracy<float>(spec, r.dir);
            double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::printf("%-28s %s  %7.1fs  set-acc %.4f  out-acc %.4f  loss %.4f\n", name.c_str(),
                        r.reused ? "reused" : "ran   ", dt, set_acc, r.final_output_accuracy,
                        r.final_loss);
        } catch (const std::exception& e) {
            ++failures;
            std::printf("%-28s FAILED: %s\n", name.c_str(), e.what());
        }
        std::fflush(stdout);
    }
    if (failures) {
        std::printf("%d run(s) failed\n", failures);
        return 1;
    }
    std::printf("toy matrix complete\n");
    return 0;
}
