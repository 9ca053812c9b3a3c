import { execFileSync } from 'child_process'
import { mkdtemp, readFile, writeFile } from 'fs/promises'
import { tmpdir } from 'os'
import { join } from 'path'
import { beforeAll, describe, expect, it } from 'vitest'

import { MockEncoder, loadEncoder } from '../src/encoder.js'
import {
  DEFAULT_TEMPLATE,
  ExtractJob,
  JobError,
  extractImages,
  extractTexts,
  jobFromManifest,
  validateJob,
  writeWarnings,
} from '../src/extract.js'
import { EmbeddingKind, decodeTable, encodeTable } from '../src/hdge.js'

let dir: string
const CLASSES = ['cat', 'dog', 'bird']

async function makeJob(overrides: Partial<ExtractJob> = {}): Promise<ExtractJob> {
  const out = await mkdtemp(join(tmpdir(), 'extract-'))
  const images = []
  for (let i = 0; i < 3; i++) {
    const path = join(out, `img${i}.bin`)
    await writeFile(path, Buffer.from([i, 1, 2, 3, i * 7]))
    images.push({ id: `sample_${i}`, path })
  }
  return { images, classes: CLASSES, template: DEFAULT_TEMPLATE, model: 'mock:64', outDir: out, ...overrides }
}

describe('job validation', () => {
  it('accepts a well-formed job', async () => {
    validateJob(await makeJob())
  })

  it('rejects duplicate image ids before any model call', async () => {
    const job = await makeJob()
    job.images.push({ ...job.images[0] })
    expect(() => validateJob(job)).toThrowError(/duplicate_id/)
  })

  it('rejects a template without the placeholder', async () => {
    const job = await makeJob({ template: 'a photo of a cat' })
    expect(() => validateJob(job)).toThrowError(/bad_template/)
  })

  it('rejects a template with two placeholders', async () => {
    const job = await makeJob({ template: '{c} and {c}' })
    expect(() => validateJob(job)).toThrowError(/bad_template/)
  })

  it('rejects duplicate classes', async () => {
    const job = await makeJob({ classes: ['cat', 'cat'] })
    expect(() => validateJob(job)).toThrowError(/duplicate_class/)
  })

  it('parses a manifest document and applies the default template', async () => {
    const job = await makeJob()
    const doc = { images: job.images, classes: job.classes }
    const parsed = jobFromManifest(doc, 'mock', job.outDir)
    expect(parsed.template).toBe(DEFAULT_TEMPLATE)
  })

  it('rejects a malformed manifest', () => {
    expect(() => jobFromManifest({ images: 'nope' }, 'mock', '.')).toThrowError(/schema/)
  })
})

describe('encoder loading', () => {
  it('loads the mock encoder with a custom width', () => {
    expect(loadEncoder('mock:96').dim).toBe(96)
    expect(loadEncoder('mock').dim).toBe(512)
  })

  it('fails fatally on an unavailable backend', () => {
    expect(() => loadEncoder('vit-b-16')).toThrowError(/model_load/)
  })

  it('is deterministic per input', async () => {
    const enc = new MockEncoder('mock:32', 32)
    const a = await enc.encodeImage(Buffer.from('pixels'))
    const b = await enc.encodeImage(Buffer.from('pixels'))
    const c = await enc.encodeImage(Buffer.from('other'))
    expect(a).toEqual(b)
    expect(a).not.toEqual(c)
    expect(await enc.encodeText('a photo of a dog')).not.toEqual(await enc.encodeText('a photo of a cat'))
  })
})

describe('extraction output', () => {
  let job: ExtractJob

  beforeAll(async () => {
    job = await makeJob()
    const encoder = loadEncoder(job.model)
    const imgs = await extractImages(job, encoder)
    await extractTexts(job, encoder)
    await writeWarnings(job, imgs.skipped)
  })

  it('writes one image row per readable id, input order preserved', async () => {
    const table = decodeTable(await readFile(join(job.outDir, 'teacher_image.hdge')))
    expect(table.kind).toBe(EmbeddingKind.TeacherImage)
    expect(table.dim).toBe(64)
    expect(table.rows.map((r) => r.key)).toEqual(['sample_0', 'sample_1', 'sample_2'])
  })

  it('writes one text row per class in the given order', async () => {
    const table = decodeTable(await readFile(join(job.outDir, 'teacher_text.hdge')))
    expect(table.kind).toBe(EmbeddingKind.TeacherText)
    expect(table.rows.map((r) => r.key)).toEqual(CLASSES)
  })

  it('emits unit rows within 1e-5', async () => {
    for (const name of ['teacher_image.hdge', 'teacher_text.hdge']) {
      const table = decodeTable(await readFile(join(job.outDir, name)))
      for (const row of table.rows) {
        let norm = 0
        for (const v of row.values) norm += v * v
        expect(Math.abs(Math.sqrt(norm) - 1)).toBeLessThan(1e-5)
      }
    }
  })

  it('records the normalization policy in the footer', async () => {
    const table = decodeTable(await readFile(join(job.outDir, 'teacher_text.hdge')))
    const footer = table.footer as { normalized: string; template: string }
    expect(footer.normalized).toContain('L2')
    expect(footer.template).toBe(DEFAULT_TEMPLATE)
  })

  it('skips unreadable images with a warning sidecar entry', async () => {
    const broken = await makeJob()
    broken.images.push({ id: 'ghost', path: join(broken.outDir, 'missing.bin') })
    const result = await extractImages(broken, loadEncoder(broken.model))
    await writeWarnings(broken, result.skipped)
    expect(result.rows).toBe(3)
    expect(result.skipped.map((s) => s.id)).toEqual(['ghost'])
    const sidecar = JSON.parse(await readFile(join(broken.outDir, 'warnings.json'), 'utf-8'))
    expect(sidecar.skipped[0].id).toBe('ghost')
  })
})

describe('container encoding', () => {
  it('round-trips rows bit-exactly', () => {
    const rows = [
      { key: 'a', values: new Float32Array([1.5, -2.25, 0.125]) },
      { key: 'b', values: new Float32Array([0.5, 3.75, -1]) },
    ]
    const decoded = decodeTable(encodeTable(EmbeddingKind.StudentFeature, 3, rows, { x: 1 }))
    expect(decoded.rows).toEqual(rows)
    expect(decoded.footer).toEqual({ x: 1 })
  })

  it('rejects NaN payloads at encode time', () => {
    const rows = [{ key: 'a', values: new Float32Array([NaN]) }]
    expect(() => encodeTable(EmbeddingKind.StudentFeature, 1, rows)).toThrowError(/non_finite/)
  })

  it('rejects duplicate keys', () => {
    const rows = [
      { key: 'a', values: new Float32Array([1]) },
      { key: 'a', values: new Float32Array([2]) },
    ]
    expect(() => encodeTable(EmbeddingKind.StudentFeature, 1, rows)).toThrowError(/duplicate_key/)
  })
})

describe('conformance with the Python toolkit', () => {
  it('emitted files load through the reference loader unmodified', async () => {
    const job = await makeJob()
    const encoder = loadEncoder(job.model)
    await extractImages(job, encoder)
    await extractTexts(job, encoder)
    const script = `
import sys
import numpy as np
from hdgkit.hdge import EmbeddingKind, load_container

imgs, img_footer = load_container(sys.argv[1] + "/teacher_image.hdge")
txts, txt_footer = load_container(sys.argv[1] + "/teacher_text.hdge")
assert imgs.kind == EmbeddingKind.TEACHER_IMAGE and txts.kind == EmbeddingKind.TEACHER_TEXT
assert imgs.keys() == ["sample_0", "sample_1", "sample_2"]
assert txts.keys() == ["cat", "dog", "bird"]
for table in (imgs, txts):
    norms = np.linalg.norm(table.matrix(), axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-5
assert img_footer["model"] == txt_footer["model"] == "mock:64"
print("conformance ok")
`
    const out = execFileSync('python3', ['-c', script, job.outDir], { encoding: 'utf-8' })
    expect(out).toContain('conformance ok')
  })

  it('the reference zero-shot path accepts the emitted tables', async () => {
    const job = await makeJob()
    const encoder = loadEncoder(job.model)
    await extractImages(job, encoder)
    await extractTexts(job, encoder)
    const script = `
import sys
from hdgkit.hdge import load_embeddings
from hdgkit.teacher import teacher_scores, zero_shot_predict

imgs = load_embeddings(sys.argv[1] + "/teacher_image.hdge")
txts = load_embeddings(sys.argv[1] + "/teacher_text.hdge")
scores = teacher_scores(imgs, txts, lam=0.5)
assert scores.probabilities.shape == (3, 3)
assert len(zero_shot_predict(scores)) == 3
print("scores ok")
`
    const out = execFileSync('python3', ['-c', script, job.outDir], { encoding: 'utf-8' })
    expect(out).toContain('scores ok')
  })
})
