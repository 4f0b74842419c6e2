// vmfuse: simulate, localize-mag, train, evaluate, align-demo.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "vmfuse/commands.hpp"

namespace {

struct Common {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::string profile;
};

void add_common(CLI::App* cmd, Common& c, const std::string& out_help) {
    cmd->add_option("--config", c.config, "key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--out", c.out, out_help)->required();
    cmd->add_option("--seed", c.seed, "root seed (overrides the config)");
    cmd->add_option("--profile", c.profile, "desk or full defaults")->check(CLI::IsMember({"desk", "full"}));
}

vmfuse::RunConfig effective(const Common& c) {
    std::vector<std::pair<std::string, std::string>> kv;
    if (!c.config.empty()) {
        std::ifstream is(c.config);
        if (!is) throw vmfuse::ConfigError("cannot open config file " + c.config);
        kv = vmfuse::parse_config_text(is);
    }
    if (c.seed) {
        std::erase_if(kv, [](const auto& p) { return p.first == "seed"; });
        kv.emplace_back("seed", std::to_string(*c.seed));
    }
    return vmfuse::make_config(kv, c.profile);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Magnetic-visual capsule localization toolkit"};
    app.require_subcommand(1);
    Common common;
    std::string dataset, checkpoint;
    std::vector<std::string> datasets;

    auto* sim = app.add_subcommand("simulate", "generate seeded synthetic datasets");
    add_common(sim, common, "output directory");

    auto* loc = app.add_subcommand("localize-mag", "5-DoF magnetic localization of one dataset");
    add_common(loc, common, "estimate file");
    loc->add_option("dataset", dataset, "dataset file")->required()->check(CLI::ExistingFile);

    auto* tr = app.add_subcommand("train", "train the fusion network");
    add_common(tr, common, "checkpoint file (the log goes to <out>.log)");
    tr->add_option("datasets", datasets, "dataset files; the last train.n_val validate")
        ->required()
        ->check(CLI::ExistingFile);

    auto* ev = app.add_subcommand("evaluate", "compare fusion against the single-sensor baselines");
    add_common(ev, common, "report directory");
    ev->add_option("checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
    ev->add_option("datasets", datasets, "held-out dataset files")->required()->check(CLI::ExistingFile);

    auto* al = app.add_subcommand("align-demo", "render synthetic frames and run the alignment solver");
    add_common(al, common, "diagnostics file");

    CLI11_PARSE(app, argc, argv);

    try {
        const auto cfg = effective(common);
        if (*sim) {
            for (const auto& f : vmfuse::cmd_simulate(cfg, common.out)) std::cout << f << '\n';
        } else if (*loc) {
            const auto s = vmfuse::cmd_localize_mag(cfg, dataset, common.out);
            std::cout << "frames " << s.frames << " converged " << s.converged << " rms_position_error "
                      << s.rms_position_error << " max_position_error " << s.max_position_error
                      << " max_heading_error " << s.max_heading_error << '\n';
        } else if (*tr) {
            const auto r = vmfuse::cmd_train(cfg, datasets, common.out, [](const vmfuse::EpochLog& e) {
                std::cerr << "epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss << " beta "
                          << e.beta << '\n';
            });
            std::cout << "best_epoch " << r.best.epoch << " beta " << r.best.beta << " epochs_run " << r.log.size()
                      << (r.diverged ? " diverged" : "") << '\n';
            if (r.diverged) return 1;
        } else if (*ev) {
            const auto c = vmfuse::cmd_evaluate(cfg, checkpoint, datasets, common.out);
            vmfuse::write_bucket_table(std::cout, c.pooled);
        } else if (*al) {
            const auto s = vmfuse::cmd_align_demo(cfg, common.out);
            std::cout << "max_trans_error " << s.max_trans_error << " max_rot_error " << s.max_rot_error
                      << " converged " << (s.converged ? 1 : 0) << '\n';
        }
    } catch (const std::exception& e) {
        std::cerr << "vmfuse: error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
