#include <iostream>

#include <CLI11.hpp>

#include "pspde/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"pspde: PDE parameter estimation with penalized tensor B-splines"};
    std::string config_path, output_dir;
    int threads = 1;
    bool verbose = false;
    app.add_option("-c,--config", config_path, "JSON run configuration (fit, simulate or calibrate)")
        ->required();
    app.add_option("-o,--output-dir", output_dir, "overrides io.output_dir");
    app.add_option("-t,--threads", threads, "OpenMP threads")->check(CLI::PositiveNumber);
    app.add_flag("-v,--verbose", verbose, "progress on stderr");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        pspde::cli::RunConfig config = pspde::cli::parse_config(config_path);
        if (!output_dir.empty()) config.output_dir = output_dir;
        pspde::cli::RunOptions opts;
        opts.threads = threads;
        if (verbose) opts.log = &std::cerr;
        const auto result = pspde::cli::run(config, opts);
        for (const auto& r : result.estimates)
            std::cout << r.parameter << ' ' << r.point << " [" << r.lo << ", " << r.hi << "] " << r.method << '\n';
        if (verbose)
            for (const auto& f : result.files) std::cerr << "wrote " << f << '\n';
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "pspde: " << e.what() << '\n';
        return pspde::cli::exit_code(e);
    }
}
