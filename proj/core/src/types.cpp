#include "gatsbi/types.hpp"

#include <filesystem>

#include "gatsbi/tensor_store.hpp"

namespace gatsbi {

void Episode::validate() const {
    require(frames.defined() && actions.defined(), "episode tensors undefined");
    if (frames.dim() != 4 || frames.size(1) != 3)
        throw InvariantError("episode frames must be [T,3,H,W], got " +
                             std::to_string(frames.dim()) + " dims");
    if (actions.dim() != 2) throw InvariantError("episode actions must be [T,A]");
    if (frames.size(0) != actions.size(0))
        throw InvariantError("episode '" + id + "': frame count " + std::to_string(frames.size(0)) +
                             " != action count " + std::to_string(actions.size(0)));
    if (frames.size(0) < 2) throw InvariantError("episode '" + id + "' shorter than 2 steps");
    if (!frames.isfinite().all().item<bool>() || !actions.isfinite().all().item<bool>())
        throw InvariantError("episode '" + id + "' contains non-finite values");
}

void save_episode(const std::string& path, const Episode& episode,
                  const std::map<std::string, torch::Tensor>& extras) {
    episode.validate();
    TensorMap entries = extras;
    entries["frames"] = episode.frames;
    entries["actions"] = episode.actions;
    save_tensors(path, entries);
}

Episode load_episode(const std::string& path) {
    TensorMap entries = load_tensors(path);
    if (!entries.count("frames") || !entries.count("actions"))
        throw FormatError("episode container " + path + " is missing frames/actions entries");
    Episode ep;
    ep.frames = entries["frames"].clamp(0.0, 1.0);
    ep.actions = entries["actions"];
    ep.id = std::filesystem::path(path).stem().string();
    ep.validate();
    return ep;
}

}  // namespace gatsbi
