import { readFile, writeFile } from 'fs/promises'
import { EmbeddingKind, EmbeddingRow, encodeTable } from './hdge.js'
import { Encoder } from './encoder.js'

export class JobError extends Error {
  constructor(
    public code: string,
    message: string,
  ) {
    super(`${code}: ${message}`)
  }
}

export interface ImageEntry {
  id: string
  path: string
}

export interface ExtractJob {
  images: ImageEntry[]
  classes: string[]
  template: string
  model: string
  outDir: string
}

export const DEFAULT_TEMPLATE = 'a photo of a {c}'

export function validateJob(job: ExtractJob): void {
  const ids = new Set<string>()
  for (const img of job.images) {
    if (!img.id) throw new JobError('empty_id', 'image id must be non-empty')
    if (ids.has(img.id)) throw new JobError('duplicate_id', `image id '${img.id}' repeated`)
    ids.add(img.id)
  }
  const classes = new Set<string>()
  for (const c of job.classes) {
    if (!c) throw new JobError('empty_class', 'class name must be non-empty')
    if (classes.has(c)) throw new JobError('duplicate_class', `class '${c}' repeated`)
    classes.add(c)
  }
  const placeholders = job.template.split('{c}').length - 1
  if (placeholders !== 1) {
    throw new JobError(
      'bad_template',
      `template must contain exactly one {c} placeholder, found ${placeholders}`,
    )
  }
}

export function jobFromManifest(doc: unknown, model: string, outDir: string): ExtractJob {
  const d = doc as { images?: unknown; classes?: unknown; template?: unknown }
  if (!Array.isArray(d.images) || !Array.isArray(d.classes)) {
    throw new JobError('schema', 'manifest needs "images" and "classes" arrays')
  }
  const images = d.images.map((e) => {
    const entry = e as { id?: unknown; path?: unknown }
    if (typeof entry.id !== 'string' || typeof entry.path !== 'string') {
      throw new JobError('schema', 'each image needs string "id" and "path"')
    }
    return { id: entry.id, path: entry.path }
  })
  const classes = d.classes.map((c) => {
    if (typeof c !== 'string') throw new JobError('schema', 'class names must be strings')
    return c
  })
  const template = d.template === undefined ? DEFAULT_TEMPLATE : String(d.template)
  const job = { images, classes, template, model, outDir }
  validateJob(job)
  return job
}

function toUnitF32(vec: Float64Array, key: string): Float32Array {
  let norm = 0
  for (const v of vec) norm += v * v
  norm = Math.sqrt(norm)
  if (!(norm > 0)) throw new JobError('zero_norm', `embedding for '${key}' has zero norm`)
  const out = new Float32Array(vec.length)
  for (let i = 0; i < vec.length; i++) out[i] = vec[i] / norm
  return out
}

export interface ExtractResult {
  rows: number
  skipped: { id: string; reason: string }[]
}

const FOOTER_BASE = { normalized: 'export-time L2, before f32 cast' }

export async function extractImages(job: ExtractJob, encoder: Encoder): Promise<ExtractResult> {
  validateJob(job)
  const rows: EmbeddingRow[] = []
  const skipped: { id: string; reason: string }[] = []
  for (const img of job.images) {
    let bytes: Buffer
    try {
      bytes = await readFile(img.path)
    } catch (e) {
      skipped.push({ id: img.id, reason: `unreadable image: ${(e as Error).message}` })
      continue
    }
    rows.push({ key: img.id, values: toUnitF32(await encoder.encodeImage(bytes), img.id) })
  }
  const blob = encodeTable(EmbeddingKind.TeacherImage, encoder.dim, rows, {
    ...FOOTER_BASE,
    model: encoder.model,
  })
  await writeFile(`${job.outDir}/teacher_image.hdge`, blob)
  return { rows: rows.length, skipped }
}

export async function extractTexts(job: ExtractJob, encoder: Encoder): Promise<ExtractResult> {
  validateJob(job)
  const rows: EmbeddingRow[] = []
  for (const cls of job.classes) {
    const prompt = job.template.replace('{c}', cls)
    rows.push({ key: cls, values: toUnitF32(await encoder.encodeText(prompt), cls) })
  }
  const blob = encodeTable(EmbeddingKind.TeacherText, encoder.dim, rows, {
    ...FOOTER_BASE,
    model: encoder.model,
    template: job.template,
  })
  await writeFile(`${job.outDir}/teacher_text.hdge`, blob)
  return { rows: rows.length, skipped: [] }
}

export async function writeWarnings(job: ExtractJob, skipped: ExtractResult['skipped']) {
  await writeFile(`${job.outDir}/warnings.json`, JSON.stringify({ skipped }, null, 2) + '\n')
}
