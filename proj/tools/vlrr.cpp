// Command-line front end: synth, prepare, run, eval, search, selfcheck.
//
// Exit codes: 0 success, 1 internal error, 2 user or configuration error.

#include <CLI11.hpp>

#include <iostream>

#include "vlrr/experiment.hpp"
#include "vlrr/parallel.hpp"

namespace {

int dispatch(int argc, char** argv) {
    CLI::App app{"Very low resolution recognition: training and evaluation harness"};
    app.require_subcommand(1);

    std::size_t jobs = 0;
    auto add_jobs = [&](CLI::App* cmd) {
        cmd->add_option("--jobs", jobs, "Worker threads for the compute kernels (default: VLRR_THREADS or 1)")
            ->check(CLI::PositiveNumber);
    };

    vlrr::SynthOptions synth;
    auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic glyph train/test split");
    synth_cmd->add_option("--out", synth.out_dir, "Output directory")->required();
    synth_cmd->add_option("--seed", synth.seed, "Random seed");
    synth_cmd->add_option("--classes", synth.classes, "Number of classes (1-16)");
    synth_cmd->add_option("--train", synth.train_count, "Training images");
    synth_cmd->add_option("--test", synth.test_count, "Test images");
    synth_cmd->add_option("--side", synth.side, "Image side length");

    vlrr::PrepareOptions prepare;
    auto* prepare_cmd = app.add_subcommand("prepare", "Build LR/HR pair archives from an HR dataset");
    prepare_cmd->add_option("--input", prepare.input_path, "HR dataset (VLRD)")->required();
    prepare_cmd->add_option("--out", prepare.out_dir, "Output directory")->required();
    prepare_cmd->add_option("--seed", prepare.seed, "Random seed for corruption");
    prepare_cmd->add_option("--scale", prepare.scale, "Downsampling factor s");
    prepare_cmd->add_option("--sp-fraction", prepare.sp_fraction, "Salt-and-pepper fraction for corrupted copies");

    vlrr::RunOptions run;
    std::uint64_t run_seed = 0;
    std::string run_out;
    auto* run_cmd = app.add_subcommand("run", "Train one model variant as described by a plan file");
    run_cmd->add_option("--plan", run.plan_path, "Plan file")->required();
    auto* run_seed_opt = run_cmd->add_option("--seed", run_seed, "Override the plan seed");
    auto* run_out_opt = run_cmd->add_option("--out", run_out, "Override the plan output directory");
    add_jobs(run_cmd);

    vlrr::EvalOptions eval;
    std::string eval_out;
    auto* eval_cmd = app.add_subcommand("eval", "Top-k error of a checkpoint on LR versions of a dataset");
    eval_cmd->add_option("--checkpoint", eval.checkpoint_path, "Checkpoint (VLRC)")->required();
    eval_cmd->add_option("--data", eval.data_path, "HR dataset (VLRD); only its LR versions are classified")
        ->required();
    eval_cmd->add_option("--scale", eval.scale, "Downsampling factor s");
    eval_cmd->add_option("--k", eval.ks, "k values (default 1 5)");
    auto* eval_out_opt = eval_cmd->add_option("--out", eval_out, "Directory for eval.txt");
    add_jobs(eval_cmd);

    vlrr::SearchOptions search;
    std::uint64_t search_seed = 0;
    std::string search_out;
    std::string oracle;
    auto* search_cmd = app.add_subcommand("search", "Greedy coupled-ratio search for a IV/V plan");
    search_cmd->add_option("--plan", search.run.plan_path, "Plan file")->required();
    auto* search_seed_opt = search_cmd->add_option("--seed", search_seed, "Override the plan seed");
    auto* search_out_opt = search_cmd->add_option("--out", search_out, "Override the plan output directory");
    search_cmd->add_option("--oracle", oracle, "Score trials with a synthetic oracle instead of training")
        ->check(CLI::IsMember({"l1"}));
    add_jobs(search_cmd);

    auto* selfcheck_cmd = app.add_subcommand("selfcheck", "Run the built-in gradient and invariant checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    vlrr::configure_threads_from_env();
    if (jobs > 0) {
        vlrr::set_thread_count(jobs);
    }

    if (*synth_cmd) {
        return vlrr::cmd_synth(synth, std::cout);
    }
    if (*prepare_cmd) {
        return vlrr::cmd_prepare(prepare, std::cout);
    }
    if (*run_cmd) {
        if (*run_seed_opt) run.seed = run_seed;
        if (*run_out_opt) run.out_dir = run_out;
        return vlrr::cmd_run(run, std::cout);
    }
    if (*eval_cmd) {
        if (*eval_out_opt) eval.out_dir = eval_out;
        return vlrr::cmd_eval(eval, std::cout);
    }
    if (*search_cmd) {
        if (*search_seed_opt) search.run.seed = search_seed;
        if (*search_out_opt) search.run.out_dir = search_out;
        search.l1_oracle = oracle == "l1";
        return vlrr::cmd_search(search, std::cout);
    }
    if (*selfcheck_cmd) {
        return vlrr::cmd_selfcheck(std::cout);
    }
    return 2;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const vlrr::Error& e) {
        // Every library error reports invalid input: plan, flags or file contents.
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}
