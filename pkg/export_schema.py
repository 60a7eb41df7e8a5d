"""
Export JSON Schemas of the config files (scenario.schema.json, maxent.schema.json) for editors and review.
Run: python export_schema.py
"""

import json

from schemas import DeviceSpec, MaxEntProblem, ScenarioConfig

SCHEMAS = {
    "scenario.schema.json": ScenarioConfig,
    "maxent.schema.json": MaxEntProblem,
    "device.schema.json": DeviceSpec,
}

if __name__ == "__main__":
    for filename, model in SCHEMAS.items():
        with open(filename, "w", encoding="utf-8") as f:
            json.dump(model.model_json_schema(), f, indent=2, ensure_ascii=False)
        print(f"Written {filename}")
