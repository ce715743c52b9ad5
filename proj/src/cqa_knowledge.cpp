#include "esi/cqa.hpp"

namespace esi::cqa {

namespace {

const std::vector<Document>& seeded_texts() {
  static const std::vector<Document> docs = {
      {"rhythm.txt",
       "Normal sinus rhythm shows a regular rate between 60 and 100 beats per minute with an "
       "upright P wave before every narrow QRS complex. In normal sinus rhythm the PR interval "
       "lies between 120 and 200 milliseconds and the QRS duration stays below 100 milliseconds. "
       "P waves are upright in leads I, II and aVF and inverted in aVR. The T wave follows the "
       "direction of the QRS complex in most leads of a normal tracing.\n\n"
       "Sinus bradycardia is a slow sinus rhythm below 60 beats per minute with long RR "
       "intervals and unchanged P wave morphology. In sinus bradycardia every P wave is followed "
       "by a QRS complex. Bradycardia is common in athletes and during sleep, and can follow beta "
       "blocker therapy or increased vagal tone. The QRS complex and T wave keep their usual "
       "shape in all twelve leads, and the slow rate of bradycardia lengthens every cycle.\n\n"
       "Sinus tachycardia is a fast sinus rhythm above 100 beats per minute with short RR "
       "intervals and small T waves that may merge with the next P wave. In sinus tachycardia "
       "each P wave precedes a narrow QRS complex. Tachycardia is caused by fever, pain, "
       "anaemia, hypovolaemia and sympathetic stimulation. At high rates the ST segment can look "
       "slightly depressed.\n\n"
       "Atrial fibrillation has an irregularly irregular ventricular rhythm with no distinct P "
       "waves and a fibrillatory baseline. The RR intervals vary from beat to beat and the QRS "
       "complex is usually narrow. Fibrillatory waves are best seen in lead V1 and the inferior "
       "leads.\n\n"
       "Atrial flutter shows regular sawtooth flutter waves at about 300 per minute, most visible "
       "in leads II, III and aVF. Conduction is often two to one, giving a ventricular rate near "
       "150 beats per minute.\n"},
      {"conduction.txt",
       "Right bundle branch block produces a prolonged QRS duration of at least 120 milliseconds "
       "with an M-shaped RSR' pattern in leads V1-V3. A wide slurred S wave appears in leads I, "
       "aVL, V5 and V6 because the right ventricle depolarises late. Secondary ST depression and "
       "T wave inversion may be present in the right precordial leads. The cardiac axis is "
       "usually normal.\n\n"
       "Left bundle branch block widens the QRS complex beyond 120 milliseconds with a broad "
       "notched R wave in leads I, aVL, V5 and V6. Leads V1 to V3 show a deep wide S wave with "
       "little or no initial R wave. ST segments and T waves are directed opposite to the main "
       "QRS deflection.\n\n"
       "First degree atrioventricular block prolongs the PR interval beyond 200 milliseconds "
       "while every P wave is still conducted. The QRS complex and the rhythm remain otherwise "
       "normal.\n\n"
       "Left anterior fascicular block shifts the QRS axis to the left beyond minus 45 degrees "
       "with a qR pattern in lead aVL and an rS pattern in leads II, III and aVF. The QRS "
       "duration stays below 120 milliseconds.\n"},
      {"structure.txt",
       "Left ventricular hypertrophy raises the QRS voltage with tall R waves in leads V5 and V6 "
       "and deep S waves in leads V1 and V2. A strain pattern of ST depression and asymmetric T "
       "wave inversion can appear in the lateral leads.\n\n"
       "Inferior myocardial infarction leaves pathological Q waves in the inferior leads II, III "
       "and aVF. In the acute phase of an inferior infarction the ST segment is elevated in the "
       "inferior leads with reciprocal depression in lead aVL.\n\n"
       "Anterior myocardial infarction shows ST elevation or pathological Q waves in the "
       "precordial leads V1 to V4 with loss of R wave progression.\n\n"
       "A premature ventricular contraction is an early wide QRS complex without a preceding P "
       "wave, followed by a compensatory pause. Its T wave points opposite to the QRS "
       "deflection.\n"},
  };
  return docs;
}

}  // namespace

// One document per paragraph, so that every condition is a chunk of its own.
std::vector<Document> seeded_knowledge_documents() {
  std::vector<Document> out;
  for (const auto& doc : seeded_texts()) {
    size_t start = 0;
    int index = 0;
    while (start < doc.text.size()) {
      size_t end = doc.text.find("\n\n", start);
      if (end == std::string::npos) end = doc.text.size();
      std::string para = doc.text.substr(start, end - start);
      while (!para.empty() && para.back() == '\n') para.pop_back();
      if (!para.empty()) out.push_back({doc.name + "#" + std::to_string(++index), para});
      start = end + 2;
    }
  }
  return out;
}

}  // namespace esi::cqa
