import { execFileSync } from "node:child_process";
import * as fs from "node:fs";
import * as path from "node:path";

/* Small toy run: enough to produce a trained, quantized, exported
 * model in under a minute.  Parity is bit-level, so accuracy of the
 * underlying model is irrelevant here. */
const CONFIG_TEMPLATE = `\
[run]
seed = 0
out_dir = {out}

[model]
i_len = 2000
sr = 2000
n_cls = 4
base_width = 2

[data]
clips_per_class = 10
clip_len = 2600
test_fold = 5

[train]
epochs = 8
lr0 = 0.05
schedule =
warmup_epochs = 2
batch_size = 16

[prune]
method = hybrid-magnitude
target_channel_fraction = 0.012
finetune_epochs_per_step = 1
sparsify_fraction = 0.5
retrain_mode = finetune-only
calib_batches = 1
calib_batch_size = 8
`;

export interface ExportedModel {
    exportDir: string;
    header: string;
    source: string;
    vectors: string;
    plan: { peak_bytes: number; naive_peak_bytes: number; mode: string };
}

/** Drive the toolchain CLI end to end and return the export paths. */
export function exportToyModel(workDir: string): ExportedModel {
    const cfgPath = path.join(workDir, "pipe.ini");
    const outDir = path.join(workDir, "run");
    fs.writeFileSync(cfgPath, CONFIG_TEMPLATE.replace("{out}", outDir));
    for (const command of ["build", "train", "prune", "quantize", "export"]) {
        execFileSync("forge", [command, "--config", cfgPath], {
            stdio: ["ignore", "pipe", "pipe"],
        });
    }
    const exportDir = path.join(outDir, "export");
    const plan = JSON.parse(
        fs.readFileSync(path.join(exportDir, "plan.json"), "utf8"));
    return {
        exportDir,
        header: path.join(exportDir, "model.h"),
        source: path.join(exportDir, "model.c"),
        vectors: path.join(exportDir, "vectors.txt"),
        plan,
    };
}

export const STRICT_FLAGS = [
    "-std=c11", "-Wall", "-Wextra", "-pedantic", "-Werror",
];

/** Compile the emitted source plus the harness into a runner binary. */
export function compileRunner(
    model: ExportedModel, harnessC: string, outBin: string,
    extraFlags: string[] = [], sourceOverride?: string,
): void {
    execFileSync("gcc", [
        ...STRICT_FLAGS, "-O2", ...extraFlags,
        "-I", model.exportDir,
        sourceOverride ?? model.source, harnessC,
        "-o", outBin,
    ], { stdio: ["ignore", "pipe", "pipe"] });
}

export interface RunReport {
    exitCode: number;
    stdout: string;
    stderr: string;
    matches: number;
    vectors: number;
    arenaBytes: number;
    scheduleBytes: number;
    totalStaticBytes: number;
}

/** Run the compiled harness on a vector file and parse its report. */
export function runVectors(bin: string, vectorFile: string): RunReport {
    let exitCode = 0;
    let stdout = "";
    let stderr = "";
    try {
        stdout = execFileSync(bin, [vectorFile], { encoding: "utf8" });
    } catch (err) {
        const e = err as { status?: number; stdout?: string; stderr?: string };
        exitCode = e.status ?? -1;
        stdout = e.stdout ?? "";
        stderr = e.stderr ?? "";
    }
    const parity = stdout.match(/parity: (\d+)\/(\d+)/);
    const sizes = stdout.match(
        /static bytes: arena=(\d+) schedule=(\d+) total=(\d+)/);
    return {
        exitCode,
        stdout,
        stderr,
        matches: parity ? Number(parity[1]) : -1,
        vectors: parity ? Number(parity[2]) : -1,
        arenaBytes: sizes ? Number(sizes[1]) : -1,
        scheduleBytes: sizes ? Number(sizes[2]) : -1,
        totalStaticBytes: sizes ? Number(sizes[3]) : -1,
    };
}

/** Expected top-1 class of each line in a vector file. */
export function expectedClasses(vectorFile: string): number[] {
    return fs.readFileSync(vectorFile, "utf8")
        .split("\n")
        .filter((line) => line.trim().length > 0)
        .map((line) => Number(line.split(" ")[1]));
}

/** Copy model.c with one output-layer bias constant replaced, so the
 * given class can no longer win: a single corrupted constant must
 * break parity on every vector that expects that class. */
export function corruptClassBias(
    source: string, cls: number, outPath: string,
): void {
    const src = fs.readFileSync(source, "utf8");
    const m = src.match(/acd_b_dense1\[\d+\] = \{([^}]*)\}/);
    if (!m || m.index === undefined) {
        throw new Error("output bias table not found in emitted source");
    }
    const vals = m[1].split(",").map((v) => v.trim()).filter((v) => v);
    vals[cls] = "-8388608";
    const start = m.index + m[0].indexOf("{") + 1;
    const end = m.index + m[0].length - 1;
    fs.writeFileSync(
        outPath, src.slice(0, start) + " " + vals.join(", ") + " " + src.slice(end));
}
