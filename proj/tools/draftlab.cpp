// Command-line front end: dataset and model training, reward fine-tuning,
// sampling, evaluation, diagnostics, and latent optimization.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "draftlab/checkpoint.hpp"
#include "draftlab/config.hpp"
#include "draftlab/dataset.hpp"
#include "draftlab/denoiser.hpp"
#include "draftlab/eval.hpp"
#include "draftlab/fd_check.hpp"
#include "draftlab/finetune.hpp"
#include "draftlab/image_io.hpp"
#include "draftlab/latent_opt.hpp"
#include "draftlab/metrics.hpp"
#include "draftlab/rewards.hpp"
#include "draftlab/rng.hpp"
#include "draftlab/sampler.hpp"
#include "draftlab/schedule.hpp"
#include "draftlab/tensor.hpp"

namespace draftlab {
namespace {

struct CommonArgs {
    std::string config_path;
    uint64_t seed = 0;
    std::string out = ".";
    std::string alphas;  // lora-scale only
};

KeyValues load_kv(const CommonArgs& args) {
    if (args.config_path.empty()) return {};
    return parse_config_file(args.config_path);
}

std::filesystem::path out_path(const CommonArgs& args, const std::string& name) {
    std::filesystem::create_directories(args.out);
    return std::filesystem::path(args.out) / name;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> parts;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, ',')) {
        cur = detail::trim(cur);
        if (!cur.empty()) parts.push_back(cur);
    }
    return parts;
}

std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    for (const auto& p : split_list(s)) out.push_back(std::stoi(p));
    return out;
}

std::vector<double> split_doubles(const std::string& s) {
    std::vector<double> out;
    for (const auto& p : split_list(s)) out.push_back(std::stod(p));
    return out;
}

// ----- reward construction -------------------------------------------------

struct RewardSpec {
    std::string names = "jpeg";    // comma list: jpeg, incompressibility, rotation, classifier, scorer
    std::string weights;           // comma list of doubles, defaults to all 1
    int jpeg_quality = 50;
    std::string classifier_path;
    int target_class = 4;
    std::string scorer_path;

    void add_to_schema(ConfigSchema& schema) {
        schema.add_string("reward", &names);
        schema.add_string("reward_weights", &weights);
        schema.add_int("jpeg_quality", &jpeg_quality);
        schema.add_string("classifier", &classifier_path);
        schema.add_int("target_class", &target_class);
        schema.add_string("scorer", &scorer_path);
    }
};

template <class T>
std::vector<RewardFn<T>> make_rewards(const RewardSpec& spec) {
    std::vector<std::string> names = split_list(spec.names);
    if (names.empty()) throw std::invalid_argument("reward: empty reward list");
    std::vector<double> weights(names.size(), 1.0);
    if (!spec.weights.empty()) {
        std::vector<double> w = split_doubles(spec.weights);
        if (w.size() != names.size())
            throw std::invalid_argument("reward_weights: length must match the reward list");
        weights = w;
    }

    std::vector<RewardFn<T>> out;
    for (size_t i = 0; i < names.size(); ++i) {
        RewardFn<T> r;
        r.name = names[i];
        r.weight = weights[i];
        if (names[i] == "jpeg") {
            int q = spec.jpeg_quality;
            r.fn = [q](Tape<T>& t, Tensor<T> x, Context) { return jpeg_reward(t, x, q); };
        } else if (names[i] == "incompressibility") {
            int q = spec.jpeg_quality;
            r.fn = [q](Tape<T>& t, Tensor<T> x, Context) { return incompressibility_reward(t, x, q); };
        } else if (names[i] == "rotation") {
            r.fn = [](Tape<T>& t, Tensor<T> x, Context) { return rotation_anticorr_reward(t, x); };
        } else if (names[i] == "classifier") {
            if (spec.classifier_path.empty())
                throw std::invalid_argument("reward classifier: set classifier=<checkpoint path>");
            auto net = std::make_shared<HeadNet<T>>(load_head_net<T>(spec.classifier_path));
            int target = spec.target_class;
            r.fn = [net, target](Tape<T>& t, Tensor<T> x, Context) {
                return classifier_reward(t, *net, x, target);
            };
        } else if (names[i] == "scorer") {
            if (spec.scorer_path.empty()) throw std::invalid_argument("reward scorer: set scorer=<checkpoint path>");
            auto net = std::make_shared<HeadNet<T>>(load_head_net<T>(spec.scorer_path));
            r.fn = [net](Tape<T>& t, Tensor<T> x, Context) { return scorer_reward(t, *net, x); };
        } else {
            throw std::invalid_argument("unknown reward: " + names[i]);
        }
        out.push_back(std::move(r));
    }
    return out;
}

template <class T>
RewardCallable<T> combined_callable(std::vector<RewardFn<T>> rewards) {
    auto shared = std::make_shared<std::vector<RewardFn<T>>>(std::move(rewards));
    return [shared](Tape<T>& t, Tensor<T> x, Context c) { return combine_rewards(t, *shared, x, c); };
}

// ----- pretrain -------------------------------------------------------------

template <class T>
int cmd_pretrain(const CommonArgs& args) {
    int dataset_n = 512, image_size = 24, channels = 32, blocks = 4, emb_dim = 32;
    int n_train = 1000, steps = 3000, batch = 8, log_every = 50;
    double lr = 1e-3, weight_decay = 0.0, context_dropout = 0.1;
    bool lr_decay = false;
    ConfigSchema schema;
    schema.add_bool("lr_decay", &lr_decay);
    schema.add_int("dataset_n", &dataset_n);
    schema.add_int("image_size", &image_size);
    schema.add_int("channels", &channels);
    schema.add_int("blocks", &blocks);
    schema.add_int("emb_dim", &emb_dim);
    schema.add_int("n_train", &n_train);
    schema.add_int("steps", &steps);
    schema.add_int("batch", &batch);
    schema.add_int("log_every", &log_every);
    schema.add_double("lr", &lr);
    schema.add_double("weight_decay", &weight_decay);
    schema.add_double("context_dropout", &context_dropout);
    schema.apply(load_kv(args));

    ModelConfig cfg;
    cfg.image_size = image_size;
    cfg.channels = channels;
    cfg.blocks = blocks;
    cfg.emb_dim = emb_dim;
    cfg.n_classes = kNumShapeClasses;

    Rng rng(args.seed);
    SyntheticDataset<T> ds = gen_dataset<T>(args.seed, dataset_n, image_size);
    DenoiserParams<T> params = init_denoiser<T>(cfg, rng);
    NoiseSchedule sched = make_schedule(n_train, std::min(50, n_train));

    AdamW<T> opt;
    opt.lr = lr;
    opt.weight_decay = weight_decay;
    opt.clip_norm = 1.0;
    opt.lr_decay = lr_decay;
    MetricsWriter metrics(out_path(args, "metrics.jsonl").string());
    for (int64_t s = 0; s < steps; ++s) {
        std::vector<const LabeledImage<T>*> b;
        for (int i = 0; i < batch; ++i)
            b.push_back(&ds.items[(static_cast<size_t>(s) * batch + i) % ds.items.size()]);
        double loss = pretrain_step(params, sched, b, rng, s, opt, context_dropout);
        if (s % log_every == 0 || s == steps - 1) {
            MetricsRecord rec;
            rec.step = s;
            rec.loss = loss;
            rec.lr = opt.lr * opt.lr_multiplier(opt.steps_done());
            metrics.write(rec);
        }
    }
    save_denoiser(out_path(args, "denoiser.bin").string(), params);
    std::cout << "saved " << out_path(args, "denoiser.bin").string() << "\n";
    return 0;
}

// ----- prediction-head training --------------------------------------------

template <class T>
ParamRefs<T> head_param_refs(HeadNet<T>& net) {
    ParamRefs<T> refs;
    for (auto& [name, e] : net.params) refs.emplace_back(name, &e.data);
    return refs;
}

template <class T>
int cmd_train_head(const CommonArgs& args, bool classifier) {
    int dataset_n = 512, image_size = 24, channels = 16, steps = 1500, batch = 16, log_every = 50;
    double lr = 2e-3, weight_decay = 0.0, aug_noise = 0.0;
    ConfigSchema schema;
    schema.add_double("aug_noise", &aug_noise);
    schema.add_int("dataset_n", &dataset_n);
    schema.add_int("image_size", &image_size);
    schema.add_int("channels", &channels);
    schema.add_int("steps", &steps);
    schema.add_int("batch", &batch);
    schema.add_int("log_every", &log_every);
    schema.add_double("lr", &lr);
    schema.add_double("weight_decay", &weight_decay);
    schema.apply(load_kv(args));

    SyntheticDataset<T> ds = gen_dataset<T>(args.seed, dataset_n, image_size);
    HeadNetConfig cfg;
    cfg.image_size = image_size;
    cfg.channels = channels;
    cfg.n_out = classifier ? kNumShapeClasses : 1;
    HeadNet<T> net = init_head_net<T>(cfg, Rng(args.seed), classifier ? "classifier_init" : "scorer_init");

    AdamW<T> opt;
    opt.lr = lr;
    opt.weight_decay = weight_decay;
    opt.clip_norm = 1.0;
    Shape img_shape = {cfg.in_channels, image_size, image_size};
    MetricsWriter metrics(out_path(args, "metrics.jsonl").string());
    // aug_noise > 0 trains the head on images with additive gaussian pixel
    // noise of a per-example strength in [0, aug_noise]; heads consuming
    // sampler outputs need this, since residual sampling noise otherwise
    // dominates the edge statistics the head relies on
    Rng aug_rng(args.seed);
    const uint64_t aug_tag = Rng::hash_tag("head_aug_eps"), sig_tag = Rng::hash_tag("head_aug_sigma");

    for (int64_t s = 0; s < steps; ++s) {
        Tape<T> tape;
        HeadNetBind<T> bind(tape, net, true);
        Tensor<T> total = tape.scalar(T(0));
        for (int i = 0; i < batch; ++i) {
            const auto& ex = ds.items[(static_cast<size_t>(s) * batch + i) % ds.items.size()];
            std::vector<T> img = ex.image;
            if (aug_noise > 0.0) {
                const uint64_t idx = static_cast<uint64_t>(s) * static_cast<uint64_t>(batch) +
                                     static_cast<uint64_t>(i);
                std::vector<T> eps(img.size());
                aug_rng.fill_normal(eps, aug_tag, idx);
                const T sig = static_cast<T>(aug_noise * aug_rng.uniform(sig_tag, idx, 0));
                for (size_t j = 0; j < img.size(); ++j) img[j] += sig * eps[j];
            }
            Tensor<T> x = tape.leaf(img_shape, img, false);
            Tensor<T> out = head_net_forward(bind, x);
            Tensor<T> term;
            if (classifier) {
                Tensor<T> logp = tape.log_softmax_rows(tape.reshape(out, {1, cfg.n_out}));
                term = tape.neg(tape.pick(logp, ex.class_id));
            } else {
                Tensor<T> target = tape.scalar(static_cast<T>(area_score(ex.area)));
                Tensor<T> d = tape.sub(tape.pick(out, 0), target);
                term = tape.mul(d, d);
            }
            total = tape.add(total, term);
        }
        Tensor<T> loss = tape.scalar_affine(total, T(1) / static_cast<T>(batch), T(0));
        double loss_val = static_cast<double>(loss.item());
        tape.backward(loss);
        GradMap<T> grads;
        for (const auto& [name, leaf] : bind.leaves()) grads[name] = tape.grad_of(leaf.id);
        opt.step(head_param_refs(net), grads);
        if (s % log_every == 0 || s == steps - 1) {
            MetricsRecord rec;
            rec.step = s;
            rec.loss = loss_val;
            metrics.write(rec);
        }
    }

    // final train-set quality report
    if (classifier) {
        int correct = 0;
        for (const auto& ex : ds.items)
            if (classify(net, ex.image) == ex.class_id) ++correct;
        std::cout << "train accuracy: " << static_cast<double>(correct) / static_cast<double>(ds.items.size())
                  << "\n";
    } else {
        double mse = 0.0;
        for (const auto& ex : ds.items) {
            Tape<T> tape;
            Tensor<T> x = tape.leaf(img_shape, ex.image, false);
            double pred = static_cast<double>(scorer_reward(tape, net, x).item());
            double d = pred - area_score(ex.area);
            mse += d * d;
        }
        std::cout << "train mse: " << mse / static_cast<double>(ds.items.size()) << "\n";
    }
    std::string file = classifier ? "classifier.bin" : "scorer.bin";
    save_head_net(out_path(args, file).string(), net);
    std::cout << "saved " << out_path(args, file).string() << "\n";
    return 0;
}

// ----- finetune -------------------------------------------------------------

template <class T>
int cmd_finetune(const CommonArgs& args) {
    std::string model;
    std::string mode = "draft-k";
    std::string classes_str;
    int n_train = 1000, sampler_steps = 50, log_every = 10;
    RewardSpec reward_spec;
    FinetuneConfig fc;
    bool checkpoint = true;
    ConfigSchema schema;
    schema.add_string("model", &model);
    schema.add_string("mode", &mode);
    schema.add_string("classes", &classes_str);
    schema.add_int("n_train", &n_train);
    schema.add_int("sampler_steps", &sampler_steps);
    schema.add_int("log_every", &log_every);
    schema.add_int("K", &fc.K);
    schema.add_int("lv_samples", &fc.lv_samples);
    schema.add_int("refl_m", &fc.refl_m);
    schema.add_double("guidance_w", &fc.guidance_w);
    schema.add_double("lr", &fc.lr);
    schema.add_int("batch", &fc.batch);
    schema.add_int("steps", &fc.steps);
    schema.add_double("weight_decay", &fc.weight_decay);
    schema.add_double("clip_norm", &fc.clip_norm);
    schema.add_double("beta_kl", &fc.beta_kl);
    schema.add_int("lora_rank", &fc.lora_rank);
    schema.add_bool("lr_decay", &fc.lr_decay);
    schema.add_bool("normalize_lv", &fc.normalize_lv);
    schema.add_bool("gradient_checkpoint", &checkpoint);
    reward_spec.add_to_schema(schema);
    schema.apply(load_kv(args));
    fc.mode = parse_mode(mode);
    fc.checkpoint = checkpoint;
    if (model.empty()) throw std::invalid_argument("finetune: set model=<denoiser checkpoint>");

    DenoiserParams<T> params = load_denoiser<T>(model);
    if (!params.has_adaptation()) init_lora(params, fc.lora_rank, Rng(args.seed));
    NoiseSchedule sched = make_schedule(n_train, sampler_steps);
    RewardCallable<T> reward = combined_callable(make_rewards<T>(reward_spec));

    std::vector<int> classes = classes_str.empty()
                                   ? std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7}
                                   : split_ints(classes_str);
    if (classes.empty()) throw std::invalid_argument("finetune: empty class list");

    Rng rng(args.seed);
    AdamW<T> opt;
    opt.lr = fc.lr;
    opt.weight_decay = fc.weight_decay;
    opt.clip_norm = fc.clip_norm;
    opt.lr_decay = fc.lr_decay;
    MetricsWriter metrics(out_path(args, "metrics.jsonl").string());
    for (int64_t s = 0; s < fc.steps; ++s) {
        std::vector<Context> contexts;
        for (int i = 0; i < fc.batch; ++i)
            contexts.push_back(Context{classes[(static_cast<size_t>(s) * fc.batch + i) % classes.size()]});
        MetricsRecord rec = finetune_step(params, sched, fc, reward, contexts, rng, s, opt);
        if (s % log_every == 0 || s == fc.steps - 1) metrics.write(rec);
    }
    save_denoiser(out_path(args, "adapted.bin").string(), params);
    std::cout << "saved " << out_path(args, "adapted.bin").string() << "\n";
    return 0;
}

// ----- sample ---------------------------------------------------------------

template <class T>
int cmd_sample(const CommonArgs& args) {
    std::string model;
    std::string classes_str = "0";
    std::string sampler = "ddim";
    int n = 4, n_train = 1000, sampler_steps = 50;
    double guidance_w = 7.5, eta = 1.0;
    ConfigSchema schema;
    schema.add_string("model", &model);
    schema.add_string("classes", &classes_str);
    schema.add_string("sampler", &sampler);
    schema.add_int("n", &n);
    schema.add_int("n_train", &n_train);
    schema.add_int("sampler_steps", &sampler_steps);
    schema.add_double("guidance_w", &guidance_w);
    schema.add_double("eta", &eta);
    schema.apply(load_kv(args));
    if (model.empty()) throw std::invalid_argument("sample: set model=<denoiser checkpoint>");
    if (sampler != "ddim" && sampler != "ancestral")
        throw std::invalid_argument("sample: sampler must be ddim or ancestral");

    DenoiserParams<T> params = load_denoiser<T>(model);
    NoiseSchedule sched = make_schedule(n_train, sampler_steps);
    Rng rng(args.seed);
    const uint64_t tag = Rng::hash_tag("sample_x_T");
    const size_t dim = static_cast<size_t>(params.cfg.in_channels) * params.cfg.image_size * params.cfg.image_size;

    for (int cls : split_ints(classes_str)) {
        for (int i = 0; i < n; ++i) {
            std::vector<T> x_T(dim);
            rng.fill_normal(x_T, tag, static_cast<uint64_t>(cls), static_cast<size_t>(i) * dim);
            std::vector<T> x0;
            if (sampler == "ddim") {
                Tape<T> tape;
                SampleConfig sc;
                sc.guidance_w = guidance_w;
                x0 = sample(tape, params, sched, Context{cls}, x_T, sc).x0_value;
            } else {
                x0 = ancestral_sample(params, sched, Context{cls}, x_T, guidance_w, rng,
                                      static_cast<uint64_t>(cls) * 100000 + static_cast<uint64_t>(i), eta)
                         .x0_value;
            }
            std::string name = "sample_c" + std::to_string(cls) + "_" + std::to_string(i) + ".ppm";
            write_ppm(out_path(args, name).string(), x0, params.cfg.image_size, params.cfg.image_size);
        }
    }
    std::cout << "wrote samples to " << args.out << "\n";
    return 0;
}

// ----- eval -----------------------------------------------------------------

template <class T>
nlohmann::ordered_json eval_to_json(const EvalSummary& summary) {
    nlohmann::ordered_json j;
    j["n_samples"] = summary.n_samples;
    for (const auto& [name, rs] : summary.rewards) {
        nlohmann::ordered_json rj;
        rj["mean"] = rs.mean;
        rj["std"] = rs.std_dev;
        rj["per_class_mean"] = rs.per_class_mean;
        j["rewards"][name] = rj;
    }
    return j;
}

template <class T>
int cmd_eval(const CommonArgs& args) {
    std::string model;
    int n_samples = 8, n_train = 1000, sampler_steps = 50;
    double guidance_w = 7.5;
    RewardSpec reward_spec;
    ConfigSchema schema;
    schema.add_string("model", &model);
    schema.add_int("n_samples", &n_samples);
    schema.add_int("n_train", &n_train);
    schema.add_int("sampler_steps", &sampler_steps);
    schema.add_double("guidance_w", &guidance_w);
    reward_spec.add_to_schema(schema);
    schema.apply(load_kv(args));
    if (model.empty()) throw std::invalid_argument("eval: set model=<denoiser checkpoint>");

    DenoiserParams<T> params = load_denoiser<T>(model);
    NoiseSchedule sched = make_schedule(n_train, sampler_steps);
    EvalSummary summary = eval_model(params, sched, make_rewards<T>(reward_spec), n_samples, guidance_w, args.seed);
    nlohmann::ordered_json j = eval_to_json<T>(summary);
    std::ofstream out(out_path(args, "eval.json"));
    out << j.dump(2) << "\n";
    std::cout << j.dump(2) << "\n";
    return 0;
}

// ----- diag-k ---------------------------------------------------------------

template <class T>
int cmd_diag_k(const CommonArgs& args) {
    std::string model;
    std::string ks_str = "1,5,10,30,50";
    int batches = 20, batch = 4, n_train = 1000, sampler_steps = 50, lora_rank = 8;
    double guidance_w = 7.5;
    RewardSpec reward_spec;
    ConfigSchema schema;
    schema.add_string("model", &model);
    schema.add_string("Ks", &ks_str);
    schema.add_int("batches", &batches);
    schema.add_int("batch", &batch);
    schema.add_int("n_train", &n_train);
    schema.add_int("sampler_steps", &sampler_steps);
    schema.add_int("lora_rank", &lora_rank);
    schema.add_double("guidance_w", &guidance_w);
    reward_spec.add_to_schema(schema);
    schema.apply(load_kv(args));
    if (model.empty()) throw std::invalid_argument("diag-k: set model=<denoiser checkpoint>");

    DenoiserParams<T> params = load_denoiser<T>(model);
    if (!params.has_adaptation()) init_lora(params, lora_rank, Rng(args.seed));
    NoiseSchedule sched = make_schedule(n_train, sampler_steps);
    RewardCallable<T> reward = combined_callable(make_rewards<T>(reward_spec));
    std::vector<int> Ks = split_ints(ks_str);

    FinetuneConfig fc;
    fc.guidance_w = guidance_w;
    Rng rng(args.seed);
    std::ofstream out(out_path(args, "diag_k.jsonl"));
    std::map<int, std::vector<double>> norms;
    std::map<int, std::vector<double>> angles;
    for (int64_t b = 0; b < batches; ++b) {
        std::vector<Context> contexts;
        for (int i = 0; i < batch; ++i)
            contexts.push_back(Context{static_cast<int>((b * batch + i) % kNumShapeClasses)});
        auto diags = k_diagnostics(params, sched, fc, reward, contexts, Ks, rng, b);
        for (const auto& d : diags) {
            double angle = 180.0 / 3.14159265358979323846 * std::acos(std::clamp(d.cos_to_k1, -1.0, 1.0));
            nlohmann::ordered_json j;
            j["batch"] = b;
            j["K"] = d.K;
            j["grad_norm"] = d.grad_norm;
            j["cos_to_k1"] = d.cos_to_k1;
            j["angle_deg"] = angle;
            out << j.dump() << "\n";
            norms[d.K].push_back(d.grad_norm);
            angles[d.K].push_back(angle);
        }
    }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    for (int K : Ks)
        std::cout << "K=" << K << " median_grad_norm=" << median(norms[K])
                  << " median_angle_deg=" << median(angles[K]) << "\n";
    return 0;
}

// ----- doodl ----------------------------------------------------------------

template <class T>
int cmd_doodl(const CommonArgs& args) {
    std::string model;
    int class_id = 0, n_seeds = 1, n_train = 1000, sampler_steps = 50;
    DoodlConfig dc;
    RewardSpec reward_spec;
    ConfigSchema schema;
    schema.add_string("model", &model);
    schema.add_int("class_id", &class_id);
    schema.add_int("seeds", &n_seeds);
    schema.add_int("n_train", &n_train);
    schema.add_int("sampler_steps", &sampler_steps);
    schema.add_int("steps", &dc.steps);
    schema.add_double("lr", &dc.lr);
    schema.add_double("guidance_w", &dc.guidance_w);
    reward_spec.add_to_schema(schema);
    schema.apply(load_kv(args));
    if (model.empty()) throw std::invalid_argument("doodl: set model=<denoiser checkpoint>");

    DenoiserParams<T> params = load_denoiser<T>(model);
    NoiseSchedule sched = make_schedule(n_train, sampler_steps);
    RewardCallable<T> reward = combined_callable(make_rewards<T>(reward_spec));
    Rng rng(args.seed);
    const uint64_t tag = Rng::hash_tag("doodl_x_T");
    const size_t dim = static_cast<size_t>(params.cfg.in_channels) * params.cfg.image_size * params.cfg.image_size;

    std::ofstream curve(out_path(args, "doodl.jsonl"));
    int improved = 0;
    for (int s = 0; s < n_seeds; ++s) {
        std::vector<T> x_T(dim);
        rng.fill_normal(x_T, tag, static_cast<uint64_t>(s), 0);
        DoodlResult<T> res = doodl_optimize(params, sched, Context{class_id}, x_T, reward, dc);
        for (size_t i = 0; i < res.reward_history.size(); ++i) {
            nlohmann::ordered_json j;
            j["seed"] = s;
            j["iter"] = i;
            j["reward"] = res.reward_history[i];
            curve << j.dump() << "\n";
        }
        if (res.best_reward > res.initial_reward) ++improved;
        write_ppm(out_path(args, "doodl_best_" + std::to_string(s) + ".ppm").string(), res.best_x0,
                  params.cfg.image_size, params.cfg.image_size);
    }
    std::cout << "improved " << improved << "/" << n_seeds << " seeds\n";
    return 0;
}

// ----- grad-check -----------------------------------------------------------

// Central finite differences over every adapter parameter of the end-to-end
// fine-tuning objective, per mode, on a micro model at 64-bit.
int cmd_grad_check(const CommonArgs& args) {
    using T = double;  // finite differences need 64-bit regardless of the run precision
    int sampler_steps = 5, n_train = 20, lora_rank = 1;
    double guidance_w = 7.5, fd_eps = 1e-4, threshold = 1e-3;
    ConfigSchema schema;
    schema.add_int("sampler_steps", &sampler_steps);
    schema.add_int("n_train", &n_train);
    schema.add_int("lora_rank", &lora_rank);
    schema.add_double("guidance_w", &guidance_w);
    schema.add_double("fd_eps", &fd_eps);
    schema.add_double("threshold", &threshold);
    schema.apply(load_kv(args));

    ModelConfig cfg = ModelConfig::micro();
    Rng rng(args.seed);
    DenoiserParams<T> params = init_denoiser<T>(cfg, rng);
    init_lora(params, lora_rank, Rng(args.seed + 1));
    for (auto& [name, a] : params.adapters)
        for (size_t i = 0; i < a.B.size(); ++i) a.B[i] = 0.01 * (static_cast<double>(i % 7) - 3.0);
    NoiseSchedule sched = make_schedule(n_train, sampler_steps);
    RewardCallable<T> reward = [](Tape<T>& t, Tensor<T> x, Context) { return t.neg(t.sum_all(t.mul(x, x))); };
    std::vector<Context> contexts = {Context{0}};

    std::vector<std::pair<std::string, FinetuneConfig>> modes;
    {
        FinetuneConfig c;
        c.guidance_w = guidance_w;
        c.mode = FinetuneMode::Draft;
        modes.emplace_back("draft", c);
        c.mode = FinetuneMode::DraftK;
        c.K = 1;
        modes.emplace_back("draft-1", c);
        c.K = 2;
        modes.emplace_back("draft-2", c);
        c.mode = FinetuneMode::DraftLV;
        c.lv_samples = 1;
        modes.emplace_back("draft-lv", c);
        c.mode = FinetuneMode::Refl;
        c.refl_m = std::min(3, sampler_steps);
        modes.emplace_back("refl", c);
    }

    bool ok = true;
    for (const auto& [name, mc] : modes) {
        FdModeReport report = fd_check_mode(params, sched, mc, reward, contexts[0], rng, fd_eps);
        std::cout << "mode " << name << ": max rel err " << report.max_rel_err << " (objective gap "
                  << report.loss_gap << ", max abs err " << report.max_abs_err << ", grad inf norm "
                  << report.grad_inf_norm << ", worst g " << report.worst_g << " vs fd " << report.worst_fd
                  << ")\n";
        if (report.max_rel_err > threshold) ok = false;
    }
    if (!ok) {
        std::cout << "grad-check FAILED (threshold " << threshold << ")\n";
        return 2;
    }
    std::cout << "grad-check passed (threshold " << threshold << ")\n";
    return 0;
}

// ----- lora-scale / lora-mix ------------------------------------------------

template <class T>
int cmd_lora_scale(const CommonArgs& args) {
    std::string model;
    int n_samples = 4, n_train = 1000, sampler_steps = 50;
    double guidance_w = 7.5;
    RewardSpec reward_spec;
    ConfigSchema schema;
    schema.add_string("model", &model);
    schema.add_int("n_samples", &n_samples);
    schema.add_int("n_train", &n_train);
    schema.add_int("sampler_steps", &sampler_steps);
    schema.add_double("guidance_w", &guidance_w);
    reward_spec.add_to_schema(schema);
    schema.apply(load_kv(args));
    if (model.empty()) throw std::invalid_argument("lora-scale: set model=<adapted checkpoint>");

    std::vector<double> alphas = args.alphas.empty() ? std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}
                                                     : split_doubles(args.alphas);
    DenoiserParams<T> params = load_denoiser<T>(model);
    if (!params.has_adaptation()) throw std::invalid_argument("lora-scale: model has no adapters");
    NoiseSchedule sched = make_schedule(n_train, sampler_steps);
    std::vector<RewardFn<T>> rewards = make_rewards<T>(reward_spec);

    nlohmann::ordered_json table = nlohmann::ordered_json::array();
    for (double a : alphas) {
        DenoiserParams<T> scaled = lora_scale_set(params, static_cast<T>(a));
        EvalSummary summary = eval_model(scaled, sched, rewards, n_samples, guidance_w, args.seed);
        nlohmann::ordered_json row;
        row["alpha"] = a;
        for (const auto& [name, rs] : summary.rewards) row["mean_" + name] = rs.mean;
        table.push_back(row);
        std::cout << row.dump() << "\n";
    }
    std::ofstream out(out_path(args, "lora_scale.json"));
    out << table.dump(2) << "\n";
    return 0;
}

template <class T>
int cmd_lora_mix(const CommonArgs& args) {
    std::string model_a, model_b;
    double alpha = 0.5, beta = 0.5;
    ConfigSchema schema;
    schema.add_string("model_a", &model_a);
    schema.add_string("model_b", &model_b);
    schema.add_double("alpha", &alpha);
    schema.add_double("beta", &beta);
    schema.apply(load_kv(args));
    if (model_a.empty() || model_b.empty())
        throw std::invalid_argument("lora-mix: set model_a and model_b checkpoint paths");

    DenoiserParams<T> a = load_denoiser<T>(model_a);
    DenoiserParams<T> b = load_denoiser<T>(model_b);
    DenoiserParams<T> mixed = lora_mix(a, b, static_cast<T>(alpha), static_cast<T>(beta));
    save_denoiser(out_path(args, "mixed.bin").string(), mixed);
    std::cout << "saved " << out_path(args, "mixed.bin").string() << "\n";
    return 0;
}

// ----- dispatch -------------------------------------------------------------

bool use_f64() {
    const char* p = std::getenv("DRAFT_LAB_PRECISION");
    if (!p || std::string(p) == "f32") return false;
    if (std::string(p) == "f64") return true;
    throw std::invalid_argument("DRAFT_LAB_PRECISION must be f32 or f64");
}

template <class Fn32, class Fn64>
int with_precision(Fn32 f32, Fn64 f64) {
    return use_f64() ? f64() : f32();
}

}  // namespace
}  // namespace draftlab

int main(int argc, char** argv) {
    using namespace draftlab;
    CLI::App app{"desk-scale diffusion reward fine-tuning laboratory"};
    app.require_subcommand(1);

    std::map<std::string, CommonArgs> args;
    auto add_sub = [&](const std::string& name, const std::string& desc) {
        CLI::App* sub = app.add_subcommand(name, desc);
        CommonArgs& a = args[name];
        sub->add_option("--config", a.config_path, "key=value config file");
        sub->add_option("--seed", a.seed, "run seed");
        sub->add_option("--out", a.out, "output directory");
        return sub;
    };
    add_sub("pretrain", "train the base denoiser on the synthetic dataset");
    add_sub("train-scorer", "train the toy area scorer");
    add_sub("train-classifier", "train the toy shape classifier");
    add_sub("finetune", "reward fine-tuning with LoRA adapters");
    add_sub("sample", "generate images from a checkpoint");
    add_sub("eval", "score generated samples with rewards");
    add_sub("diag-k", "gradient norms and angles across truncation depths");
    add_sub("doodl", "optimize the initial latent for reward");
    add_sub("grad-check", "finite-difference audit of every fine-tuning mode");
    add_sub("lora-scale", "reward table across adapter scales")
        ->add_option("--alphas", args["lora-scale"].alphas, "comma list of adapter scales");
    add_sub("lora-mix", "merge two adapter sets into one checkpoint");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        const std::string name = app.get_subcommands().front()->get_name();
        const CommonArgs& a = args.at(name);
        if (name == "pretrain")
            return with_precision([&] { return cmd_pretrain<float>(a); }, [&] { return cmd_pretrain<double>(a); });
        if (name == "train-scorer")
            return with_precision([&] { return cmd_train_head<float>(a, false); },
                                  [&] { return cmd_train_head<double>(a, false); });
        if (name == "train-classifier")
            return with_precision([&] { return cmd_train_head<float>(a, true); },
                                  [&] { return cmd_train_head<double>(a, true); });
        if (name == "finetune")
            return with_precision([&] { return cmd_finetune<float>(a); }, [&] { return cmd_finetune<double>(a); });
        if (name == "sample")
            return with_precision([&] { return cmd_sample<float>(a); }, [&] { return cmd_sample<double>(a); });
        if (name == "eval")
            return with_precision([&] { return cmd_eval<float>(a); }, [&] { return cmd_eval<double>(a); });
        if (name == "diag-k")
            return with_precision([&] { return cmd_diag_k<float>(a); }, [&] { return cmd_diag_k<double>(a); });
        if (name == "doodl")
            return with_precision([&] { return cmd_doodl<float>(a); }, [&] { return cmd_doodl<double>(a); });
        if (name == "grad-check") return cmd_grad_check(a);
        if (name == "lora-scale")
            return with_precision([&] { return cmd_lora_scale<float>(a); },
                                  [&] { return cmd_lora_scale<double>(a); });
        if (name == "lora-mix")
            return with_precision([&] { return cmd_lora_mix<float>(a); }, [&] { return cmd_lora_mix<double>(a); });
        throw std::invalid_argument("unknown subcommand " + name);
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
