// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "mergeforge/error.hpp"
#include "mergeforge/philox.hpp"

namespace mergeforge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kGramSymmetryTolerance = 1e-4;

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

fs::path task_file(const fs::path& root, const std::string& task, StatsKind kind) {
    return root / task / (std::string(to_string(kind)) + ".safetensors");
}

void check_fisher(const std::string& key, const Tensor& t) {
    const auto v = t.f32();
    for (std::size_t i = 0; i < v.size(); ++i)
        if (!(v[i] >= 0.0f) || !std::isfinite(v[i]))
            throw Error(ErrorCode::NegativeFisher,
                        "Fisher value " + std::to_string(v[i]) + " at '" + key + "' index " + std::to_string(i), key,
                        {"index=" + std::to_string(i)});
}

void check_gram(const std::string& key, const Tensor& g) {
    const auto n = static_cast<std::size_t>(g.shape()[0]);
    const auto v = g.f32();
    double scale = 0.0;
    for (float x : v) {
        if (!std::isfinite(x))
            throw Error(ErrorCode::AsymmetricGram, "non-finite Gram entry for '" + key + "'", key);
        scale = std::max(scale, static_cast<double>(std::fabs(x)));
    }
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = r + 1; c < n; ++c) {
            const double d = std::fabs(static_cast<double>(v[r * n + c]) - v[c * n + r]);
            if (d > kGramSymmetryTolerance * scale)
                throw Error(ErrorCode::AsymmetricGram,
                            "Gram for '" + key + "' is not symmetric at (" + std::to_string(r) + ", " +
                                std::to_string(c) + ")",
                            key);
        }
}

void check_mask(const std::string& key, const Tensor& raw) {
    if (raw.dtype() != DType::U8)
        throw Error(ErrorCode::InvalidMask, "mask for '" + key + "' must be stored as U8", key);
    const auto bytes = raw.bytes();
    for (std::size_t i = 0; i < bytes.size(); ++i)
        if (std::to_integer<unsigned>(bytes[i]) > 1)
            throw Error(ErrorCode::InvalidMask, "mask for '" + key + "' has a value other than 0/1 at index " +
                                                    std::to_string(i), key);
}

} // namespace

void to_json(json& j, const StatsManifest& m) {
    j = json::object();
    j["kind"] = std::string(to_string(m.kind));
    j["task_names"] = m.task_names;
    const bool uniform = !m.sample_counts.empty() &&
                         std::all_of(m.sample_counts.begin(), m.sample_counts.end(),
                                     [&](std::int64_t c) { return c == m.sample_counts.front(); });
    if (uniform)
        j["sample_count"] = m.sample_counts.front();
    else
        j["sample_count"] = m.sample_counts;
    j["base_model_fingerprint"] = hex64(m.base_model_fingerprint);
    if (!m.fisher_mode.empty())
        j["fisher_mode"] = m.fisher_mode;
}

void from_json(const json& j, StatsManifest& m) {
    auto bad = [](const std::string& what) { throw Error(ErrorCode::KindMismatch, "stats manifest: " + what); };
    if (!j.is_object())
        bad("not a JSON object");
    for (const char* field : {"kind", "task_names", "sample_count", "base_model_fingerprint"})
        if (!j.contains(field))
            bad(std::string("missing '") + field + "'");
    try {
        const auto kind = parse_stats_kind(j.at("kind").get<std::string>());
        if (!kind)
            bad("unknown kind '" + j.at("kind").get<std::string>() + "'");
        m.kind = *kind;
        m.task_names = j.at("task_names").get<std::vector<std::string>>();
        if (m.task_names.empty())
            bad("task_names is empty");
        const auto& sc = j.at("sample_count");
        if (sc.is_array())
            m.sample_counts = sc.get<std::vector<std::int64_t>>();
        else
            m.sample_counts.assign(m.task_names.size(), sc.get<std::int64_t>());
        if (m.sample_counts.size() != m.task_names.size())
            bad("sample_count list length differs from task_names");
        for (auto c : m.sample_counts)
            if (c < 1)
                bad("sample_count must be >= 1");
        m.base_model_fingerprint = std::stoull(j.at("base_model_fingerprint").get<std::string>(), nullptr, 16);
        m.fisher_mode = j.value("fisher_mode", std::string());
    } catch (const json::exception& e) {
        bad(e.what());
    } catch (const std::logic_error& e) {
        bad(std::string("bad base_model_fingerprint: ") + e.what());
    }
}

std::uint64_t manifest_fingerprint(const CheckpointManifest& manifest) {
    std::uint64_t h = fnv1a64("");
    for (const auto& [key, e] : manifest.entries)
        h = fnv1a64(key + ":" + shape_to_string(e.shape) + ";", h);
    return h;
}

bool StatsBundle::covers(const std::string& key) const {
    return !mTasks.empty() &&
           std::all_of(mTasks.begin(), mTasks.end(), [&](const SafetensorsHeader& h) { return h.entries.count(key); });
}

std::vector<Tensor> StatsBundle::load(const std::string& key) const {
    std::vector<Tensor> out;
    out.reserve(mTasks.size());
    for (std::size_t i = 0; i < mTasks.size(); ++i) {
        auto it = mTasks[i].entries.find(key);
        if (it == mTasks[i].entries.end())
            throw Error(ErrorCode::MissingStats,
                        "no " + std::string(to_string(kind())) + " stats for '" + key + "' in task '" +
                            mManifest.task_names[i] + "'",
                        key);
        FileHandle file(it->second.file);
        Tensor t = read_entry_as_f32(file, it->second, key);
        if (kind() == StatsKind::Gram) {
            const float scale = 1.0f / static_cast<float>(mManifest.sample_counts[i]);
            for (auto& v : t.f32())
                v *= scale;
        }
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<BinaryMask> StatsBundle::load_masks(const std::string& key) const {
    std::vector<BinaryMask> masks;
    for (const Tensor& t : load(key)) {
        BinaryMask m(t.shape());
        const auto v = t.f32();
        for (std::size_t i = 0; i < v.size(); ++i)
            if (v[i] != 0.0f)
                m.set(static_cast<std::int64_t>(i));
        masks.push_back(std::move(m));
    }
    return masks;
}

StatsBundle load_stats(const fs::path& root, StatsKind expected, const CheckpointManifest& checkpoint) {
    if (!fs::is_directory(root))
        throw Error(ErrorCode::Io, "stats directory '" + root.string() + "' does not exist", root.string());
    StatsBundle bundle;
    bundle.mRoot = root;
    {
        const fs::path file = root / "manifest.json";
        std::ifstream in(file);
        if (!in)
            throw Error(ErrorCode::Io, "cannot open '" + file.string() + "'", file.string());
        json doc;
        try {
            doc = json::parse(in);
        } catch (const json::exception& e) {
            throw Error(ErrorCode::KindMismatch, file.string() + ": invalid JSON: " + e.what());
        }
        bundle.mManifest = doc.get<StatsManifest>();
    }
    const StatsManifest& m = bundle.mManifest;
    if (m.kind != expected)
        throw Error(ErrorCode::KindMismatch, "bundle holds " + std::string(to_string(m.kind)) + " statistics, expected " +
                                                 std::string(to_string(expected)));
    if (m.base_model_fingerprint != manifest_fingerprint(checkpoint))
        throw Error(ErrorCode::BaseModelMismatch, "stats were computed for a different base model (fingerprint " +
                                                      hex64(m.base_model_fingerprint) + ", checkpoint " +
                                                      hex64(manifest_fingerprint(checkpoint)) + ")");

    for (const auto& task : m.task_names) {
        const fs::path file = task_file(root, task, m.kind);
        if (!fs::is_regular_file(file))
            throw Error(ErrorCode::MissingStats, "missing stats file '" + file.string() + "'", file.string());
        bundle.mTasks.push_back(read_safetensors_header(file));
    }

    std::vector<std::string> uncovered;
    for (std::size_t i = 0; i < bundle.mTasks.size(); ++i) {
        const auto& header = bundle.mTasks[i];
        FileHandle file(task_file(root, m.task_names[i], m.kind));
        for (const auto& [key, entry] : header.entries) {
            if (!checkpoint.contains(key))
                throw Error(ErrorCode::KeyMismatch, "stats key '" + key + "' is not a checkpoint parameter", key);
            const Shape& param = checkpoint.at(key).shape;
            switch (m.kind) {
            case StatsKind::FisherDiag: {
                if (entry.shape != param)
                    throw Error(ErrorCode::ShapeMismatch, "Fisher for '" + key + "' has shape " +
                                                              shape_to_string(entry.shape) + ", parameter has " +
                                                              shape_to_string(param), key);
                if (entry.dtype == DType::U8)
                    throw Error(ErrorCode::UnsupportedDtype, "Fisher values must be floating point", key);
                check_fisher(key, read_entry_as_f32(file, entry, key));
                break;
            }
            case StatsKind::Gram: {
                if (param.size() != 2 || entry.shape != Shape{param[1], param[1]})
                    throw Error(ErrorCode::GramShapeMismatch,
                                "Gram for '" + key + "' has shape " + shape_to_string(entry.shape) +
                                    ", parameter " + shape_to_string(param) + " needs a square matrix of its input dimension",
                                key);
                if (entry.dtype == DType::U8)
                    throw Error(ErrorCode::UnsupportedDtype, "Gram values must be floating point", key);
                check_gram(key, read_entry_as_f32(file, entry, key));
                break;
            }
            case StatsKind::Mask: {
                if (entry.shape != param)
                    throw Error(ErrorCode::ShapeMismatch, "mask for '" + key + "' has shape " +
                                                              shape_to_string(entry.shape) + ", parameter has " +
                                                              shape_to_string(param), key);
                check_mask(key, read_entry(file, entry, key));
                break;
            }
            }
        }
    }

    // A key must be present for every task or for none.
    for (const auto& [key, entry] : checkpoint.entries) {
        const auto have = std::count_if(bundle.mTasks.begin(), bundle.mTasks.end(),
                                        [&](const SafetensorsHeader& h) { return h.entries.count(key) != 0; });
        if (have != 0 && static_cast<std::size_t>(have) != bundle.mTasks.size())
            throw Error(ErrorCode::MissingStats, "stats for '" + key + "' present for some tasks only", key);
        if (have == 0 && m.kind != StatsKind::Gram && uncovered.size() < 10)
            uncovered.push_back(key);
    }
    if (!uncovered.empty())
        throw Error(ErrorCode::MissingStats,
                    std::string(to_string(m.kind)) + " bundle does not cover parameter '" + uncovered.front() + "'",
                    uncovered.front(), uncovered);
    return bundle;
}

void write_stats_bundle(const fs::path& root, const StatsManifest& manifest,
                        const std::vector<std::vector<std::pair<std::string, Tensor>>>& per_task) {
    if (per_task.size() != manifest.task_names.size())
        throw Error(ErrorCode::InvalidArgument, "write_stats_bundle: tensor lists do not match task_names");
    fs::create_directories(root);
    {
        std::ofstream out(root / "manifest.json", std::ios::trunc);
        out << json(manifest).dump(2) << '\n';
        if (!out)
            throw Error(ErrorCode::Io, "cannot write stats manifest under '" + root.string() + "'");
    }
    for (std::size_t i = 0; i < per_task.size(); ++i) {
        const fs::path file = task_file(root, manifest.task_names[i], manifest.kind);
        fs::create_directories(file.parent_path());
        std::vector<std::pair<std::string, const Tensor*>> sorted;
        for (const auto& [key, t] : per_task[i])
            sorted.emplace_back(key, &t);
        std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        std::vector<TensorSpec> specs;
        std::vector<Tensor> encoded;
        for (const auto& [key, t] : sorted) {
            const DType dtype = manifest.kind == StatsKind::Mask ? DType::U8 : t->dtype();
            specs.push_back({key, t->shape(), dtype});
            encoded.push_back(t->cast(dtype));
        }
        std::ofstream out(file, std::ios::binary | std::ios::trunc);
        const std::string header = encode_safetensors_header(specs, {});
        out.write(header.data(), static_cast<std::streamsize>(header.size()));
        for (const auto& t : encoded)
            out.write(reinterpret_cast<const char*>(t.bytes().data()), static_cast<std::streamsize>(t.nbytes()));
        if (!out)
            throw Error(ErrorCode::Io, "cannot write '" + file.string() + "'", file.string());
    }
}

} // namespace mergeforge
