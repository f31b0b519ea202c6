/* tslint:disable */
/* eslint-disable */

/**
 * Which time steps feed each patch.
 */
export function patch_layout(lookback: number, patch_len: number, stride: number): string;

/**
 * Normalizes one series with its own statistics and restores it.
 */
export function revin_demo(values: Float64Array): string;

/**
 * Trains a tiny model for `epochs` passes over a small slice of the lagged
 * synthetic series and forecasts the first test window.
 */
export function train_tiny(seed: bigint, epochs: number, channel_attention: boolean): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly patch_layout: (a: number, b: number, c: number) => [number, number];
    readonly revin_demo: (a: number, b: number) => [number, number];
    readonly train_tiny: (a: bigint, b: number, c: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
