#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "commands.hpp"

using namespace tripembed;

int main(int argc, char** argv) {
    CLI::App app{"Listing and traveler embeddings for booking-intent prediction"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    app.add_option("--config", config_path, "JSON config file");
    app.add_option("--seed", seed, "global seed (overrides the config)");
    app.add_option("--out", out, "output directory (overrides the config)");

    auto* generate = app.add_subcommand("generate", "write a synthetic session log and its geography");
    auto* train_embeddings = app.add_subcommand("train-embeddings", "train skip-gram listing embeddings");
    auto* coldstart = app.add_subcommand("coldstart", "extrapolate embeddings for cold listings");
    auto* train_traveler = app.add_subcommand("train-traveler", "train a traveler booking model");
    std::string kind;
    train_traveler->add_option("--kind", kind, "average, dan, lstm or lstm_attention")->required();
    auto* evaluate = app.add_subcommand("evaluate", "downstream booking-intent evaluation");
    std::optional<std::string> settings;
    evaluate->add_option("--settings", settings, "comma-separated settings");
    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every backward pass");
    double corrupt = 0.0;
    grad->add_option("--corrupt-gradient", corrupt)->group("");
    auto* pipeline = app.add_subcommand("pipeline", "run every stage in order");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }

    try {
        auto cfg = config_path.empty() ? cli::parse_config(nlohmann::json::object()) : cli::load_config(config_path);
        if (seed) cfg.seed = *seed;
        if (out) cfg.out = *out;

        if (*generate) return cli::cmd_generate(cfg, std::cout);
        if (*train_embeddings) return cli::cmd_train_embeddings(cfg, std::cout);
        if (*coldstart) return cli::cmd_coldstart(cfg, std::cout);
        if (*train_traveler) return cli::cmd_train_traveler(cfg, cli::parse_trainable_kind(kind), std::cout);
        if (*evaluate) return cli::cmd_evaluate(cfg, settings.value_or(cfg.eval.settings), std::cout);
        if (*grad) {
            gradcheck::Options opt;
            opt.seed = cfg.seed;
            opt.corrupt = corrupt;
            return cli::cmd_gradcheck(opt, std::cout);
        }
        if (*pipeline) return cli::cmd_pipeline(cfg, std::cout);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
