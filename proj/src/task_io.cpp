#include <fstream>

#include <nlohmann/json.hpp>

#include "neurmatch/error.hpp"
#include "neurmatch/synthdata.hpp"

namespace neurmatch::synth {

nlohmann::json task_to_json(const PairTask& task) {
  nlohmann::json matches = nlohmann::json::array();
  for (const auto& m : task.gt_matches) matches.push_back({m.a, m.b});
  const auto& meta = task.meta;
  return {{"format", "neurmatch-task"},
          {"format_version", kTaskFormatVersion},
          {"gt_transform", geometry::to_json(task.gt_transform)},
          {"gt_matches", matches},
          {"meta",
           {{"kind", meta.kind},
            {"modality_a", meta.modality_a},
            {"modality_b", meta.modality_b},
            {"seed", meta.seed},
            {"difficulty", meta.difficulty},
            {"rotation", meta.rotation},
            {"contrast_variant", meta.contrast_variant},
            {"image_size", meta.image_size},
            {"gt_tolerance", meta.gt_tolerance},
            {"unit", "px"}}}};
}

void save_task(const PairTask& task, const std::filesystem::path& dir,
               bool write_images) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "task.json");
    if (!f) throw Error("cannot write " + (dir / "task.json").string());
    f << task_to_json(task).dump(1) << '\n';
  }
  auto with_points = [](descriptors::DescriptorSet ds,
                        const std::vector<Point2>& pts) {
    ds.keypoints = pts;
    return ds;
  };
  descriptors::write_descriptors(with_points(task.descriptors_a, task.keypoints_a),
                                 dir / "a.nmds");
  descriptors::write_descriptors(with_points(task.descriptors_b, task.keypoints_b),
                                 dir / "b.nmds");
  if (write_images && task.image_a.width > 0) {
    write_png16(task.image_a, dir / "image_a.png");
    write_png16(task.image_b, dir / "image_b.png");
  }
}

PairTask load_task(const std::filesystem::path& dir) {
  std::ifstream f(dir / "task.json");
  if (!f) throw Error("cannot open " + (dir / "task.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("task.json: " + std::string(e.what()));
  }
  PairTask task;
  try {
    if (j.at("format").get<std::string>() != "neurmatch-task" ||
        j.at("format_version").get<int>() != kTaskFormatVersion) {
      throw FormatError("task.json: unsupported format");
    }
    task.gt_transform = geometry::tps_from_json(j.at("gt_transform"));
    for (const auto& m : j.at("gt_matches")) {
      task.gt_matches.push_back({m.at(0).get<int>(), m.at(1).get<int>()});
    }
    const auto& jm = j.at("meta");
    task.meta.kind = jm.at("kind").get<std::string>();
    task.meta.modality_a = jm.at("modality_a").get<std::string>();
    task.meta.modality_b = jm.at("modality_b").get<std::string>();
    task.meta.seed = jm.at("seed").get<std::uint64_t>();
    task.meta.difficulty = jm.at("difficulty").get<double>();
    task.meta.rotation = jm.at("rotation").get<double>();
    task.meta.contrast_variant = jm.at("contrast_variant").get<int>();
    task.meta.image_size = jm.at("image_size").get<int>();
    task.meta.gt_tolerance = jm.at("gt_tolerance").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("task.json: " + std::string(e.what()));
  }
  task.descriptors_a = descriptors::read_descriptors(dir / "a.nmds");
  task.descriptors_b = descriptors::read_descriptors(dir / "b.nmds");
  task.descriptors_a.source = descriptors::DescriptorSource::kBuiltinPatch;
  task.descriptors_b.source = descriptors::DescriptorSource::kBuiltinPatch;
  task.keypoints_a = task.descriptors_a.keypoints;
  task.keypoints_b = task.descriptors_b.keypoints;
  if (std::filesystem::exists(dir / "image_a.png")) {
    task.image_a = read_png16(dir / "image_a.png");
    task.image_b = read_png16(dir / "image_b.png");
  }
  task.validate();
  return task;
}

}  // namespace neurmatch::synth
